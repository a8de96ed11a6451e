//! Distils the DPO retriever into students that see fewer image tokens and compares accuracy
//! and decode latency against the full-token reference.
//!
//!     cargo run --release --example prune_tokens [-- standard]

use sidsearch::corpus::generate_catalog;
use sidsearch::decode::SidTrie;
use sidsearch::genmodel::{GrData, Stage};
use sidsearch::pipeline::{fit_fusion, fit_vrq, prune_study, train_gr, PipelineConfig};
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

    let v = cfg.catalog.v_max;
    let sizes = [v, v * 2 / 3, v / 3, v / 4];
    let study = prune_study(&catalog, &data, &trie, &models.stages[&Stage::Dpo], &sizes, &cfg)?;
    println!("{:<10} {:>6} {:>7} {:>10} {:>10}  curriculum", "model", "HR@4", "MRR@4", "decode ms", "select ms");
    let r = &study.reference;
    println!("{:<10} {:>6.3} {:>7.3} {:>10.3} {:>10}", "reference", r.hr4, r.mrr4, r.mean_decode_secs * 1e3, "-");
    for r in &study.rows {
        println!(
            "{:<10} {:>6.3} {:>7.3} {:>10.3} {:>10.3}  {:?}",
            format!("v_sub={}", r.v_sub),
            r.hr4,
            r.mrr4,
            r.mean_decode_secs * 1e3,
            r.mean_select_secs * 1e3,
            r.tokens_per_epoch
        );
    }
    Ok(())
}
