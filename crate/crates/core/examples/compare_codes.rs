//! Compares the five tokenizers on code quality and on image-to-item generative retrieval.
//!
//!     cargo run --release --example compare_codes [-- standard]

use sidsearch::corpus::generate_catalog;
use sidsearch::pipeline::{fit_baseline, fit_fusion, fit_vrq, run_method, PipelineConfig};
use sidsearch::quantize::tokenizer::vrq_tokenizer;

fn main() -> sidsearch::Result<()> {
    let cfg = match std::env::args().nth(1).as_deref() {
        Some("standard") => PipelineConfig::standard(7),
        _ => PipelineConfig::small(7),
    };
    let catalog = generate_catalog(&cfg.catalog)?;
    let (fusion, _) = fit_fusion(&catalog, &cfg)?;
    let (stack, fused, _) = fit_vrq(&catalog, &fusion, &cfg.vrq)?;

    println!("{:<10} {:>7} {:>9} {:>8} {:>9}", "method", "ICO", "QAS HR@4", "GR HR@4", "GR MRR@4");
    for name in ["rq-kmeans", "rq-vae", "opq", "fsq"] {
        let tok = fit_baseline(name, &catalog, &cfg.levels, cfg.catalog.seed)?;
        print_row(&run_method(&catalog, &tok, &cfg)?.report);
    }
    let tok = vrq_tokenizer(&catalog, fused, stack);
    print_row(&run_method(&catalog, &tok, &cfg)?.report);
    Ok(())
}

fn print_row(r: &sidsearch::codemetrics::CodeReport) {
    let gr = r.gr.as_ref().expect("run_method trains a retriever");
    println!("{:<10} {:>7.2} {:>9.3} {:>8.3} {:>9.3}", r.method, r.ico, r.qas_hr[&4], gr.hr(4), gr.mrr(4));
}
