//! Semantic-ID visual search at desk scale.
//!
//! The pipeline: a synthetic multi-view catalog ([`corpus`]) feeds a gated image/category
//! fusion encoder ([`fusion`]), whose embeddings are quantized into hierarchical semantic IDs
//! ([`quantize`]). A compact autoregressive scorer ([`genmodel`]) learns to emit those IDs from
//! query tokens, decoded under a trie constraint ([`decode`]) and optionally accelerated by
//! visual-token pruning ([`prune`]). [`codemetrics`] scores both the codes and the retrieval.

pub mod blob;
pub mod cli;
pub mod codemetrics;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod fusion;
pub mod genmodel;
pub mod kmeans;
pub mod math;
pub mod numgrad;
pub mod pipeline;
pub mod prune;
pub mod quantize;

pub use error::{Error, Result};
