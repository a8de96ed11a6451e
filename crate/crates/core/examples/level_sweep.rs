//! Varies tokenizer depth and first-level width with everything else fixed.
//!
//!     cargo run --release --example level_sweep [-- standard]

use sidsearch::corpus::generate_catalog;
use sidsearch::pipeline::{fit_fusion, sweep, PipelineConfig};

fn main() -> sidsearch::Result<()> {
    let cfg = match std::env::args().nth(1).as_deref() {
        Some("standard") => PipelineConfig::standard(7),
        _ => PipelineConfig::small(7),
    };
    let catalog = generate_catalog(&cfg.catalog)?;
    let (fusion, _) = fit_fusion(&catalog, &cfg)?;
    println!("{:<6} {:<12} {:>7} {:>9} {:>8} {:>9}", "axis", "levels", "ICO", "QAS HR@4", "GR HR@4", "GR MRR@4");
    for p in sweep(&catalog, &fusion, &cfg)? {
        println!(
            "{:<6} {:<12} {:>7.2} {:>9.3} {:>8.3} {:>9.3}",
            p.axis, p.levels, p.ico, p.qas_hr4, p.gr_hr4, p.gr_mrr4
        );
    }
    Ok(())
}
