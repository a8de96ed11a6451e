//! Trains the fusion model and the hybrid residual tokenizer, then encodes every item.
//!
//!     cargo run --release --example tokenize_catalog [-- standard]

use sidsearch::codemetrics::{codebook_utilization, eval_pairs, ico, CodeReport};
use sidsearch::corpus::generate_catalog;
use sidsearch::pipeline::{fit_fusion, fit_vrq, PipelineConfig, KS};
use sidsearch::quantize::tokenizer::{encode_catalog, vrq_tokenizer};

fn main() -> sidsearch::Result<()> {
    let cfg = match std::env::args().nth(1).as_deref() {
        Some("standard") => PipelineConfig::standard(7),
        _ => PipelineConfig::small(7),
    };
    let catalog = generate_catalog(&cfg.catalog)?;

    let (fusion, trace) = fit_fusion(&catalog, &cfg)?;
    println!("fusion loss by epoch: {:.4?}", trace.epoch_loss);

    let (stack, fused, vrq) = fit_vrq(&catalog, &fusion, &cfg.vrq)?;
    println!("tokenizer loss by epoch: {:.4?}", vrq.epoch_loss);

    let tok = vrq_tokenizer(&catalog, fused, stack);
    let table = encode_catalog(&catalog, &tok)?;
    for (item, sid) in table.canonical_sids().into_iter().take(5) {
        println!("item {item}: {sid}");
    }
    let sids: Vec<_> = table.canonical_sids().into_iter().map(|(_, s)| s).collect();
    println!("items per code: {:.2}", ico(&table)?);
    println!("codebook utilization per level: {:.2?}", codebook_utilization(&sids, &table.levels));

    let report = CodeReport::build(&catalog, &tok, &table, &eval_pairs(&catalog), &KS)?;
    println!("held-out view HR@4 by code embedding: {:.3}", report.qas_hr[&4]);
    Ok(())
}
