//! Trains the retriever through pretraining, SFT, personalized SFT and DPO, scores held-out
//! sessions after each stage and prints the final model's ranking for one session.
//!
//!     cargo run --release --example staged_retrieval [-- standard]

use sidsearch::corpus::generate_catalog;
use sidsearch::decode::{retrieve, ScorerQuery, SidTrie};
use sidsearch::genmodel::{GrData, Stage};
use sidsearch::pipeline::{evaluate_queries, fit_fusion, fit_vrq, session_queries, train_gr, PipelineConfig};
use sidsearch::quantize::tokenizer::{encode_catalog, vrq_tokenizer};

fn main() -> sidsearch::Result<()> {
    let cfg = match std::env::args().nth(1).as_deref() {
        Some("standard") => PipelineConfig::standard(7),
        _ => PipelineConfig::small(7),
    };
    let catalog = generate_catalog(&cfg.catalog)?;
    let (fusion, _) = fit_fusion(&catalog, &cfg)?;
    let (stack, fused, _) = fit_vrq(&catalog, &fusion, &cfg.vrq)?;
    let tok = vrq_tokenizer(&catalog, fused, stack);
    let table = encode_catalog(&catalog, &tok)?;
    let data = GrData::build(&catalog, &tok, &table)?;
    let trie = SidTrie::build(&table)?;

    let models = train_gr(&catalog, &data, &cfg, Stage::Dpo)?;
    let (_, held) = catalog.session_split(cfg.session_holdout);
    for (stage, params) in &models.stages {
        let queries = session_queries(&catalog, &data, *stage, &held);
        let (scores, _) = evaluate_queries(params, &trie, &catalog, &queries, &cfg.retrieve)?;
        println!("{stage:<9} HR@10 {:.3}  MRR@10 {:.4}", scores.hr(10), scores.mrr(10));
    }

    let s = held[0];
    let input = data.session_input(&catalog, s).for_stage(Stage::Dpo);
    let q = ScorerQuery::new(&models.stages[&Stage::Dpo], &input)?;
    println!("session {s}, purchased item {}:", catalog.sessions[s].purchased);
    for r in retrieve(s as u64, &q, &trie, &catalog, &cfg.retrieve, None)? {
        println!("  #{:<2} item {:<5} sid {:<12} logp {:>7.3}  s_conv {:.3}", r.rank, r.item_id, r.sid, r.logprob, r.s_conv);
    }
    Ok(())
}
