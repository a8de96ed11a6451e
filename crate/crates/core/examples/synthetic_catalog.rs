//! Generates a small catalog, writes it to disk, reads it back and prints its shape.
//!
//!     cargo run --example synthetic_catalog [-- <out-dir>]

use sidsearch::corpus::{generate_catalog, load_catalog, save_catalog, CatalogConfig};
use sidsearch::math::cosine;

fn main() -> sidsearch::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("sidsearch-catalog"));
    let catalog = generate_catalog(&CatalogConfig::small(7))?;
    save_catalog(&catalog, &dir)?;
    let back = load_catalog(&dir)?;
    assert_eq!(back, catalog);

    let c = &catalog.config;
    println!("{} items x {} views x {} tokens x {} dims -> {}", c.n_items, c.n_views, c.v_max, c.dim, dir.display());
    println!(
        "{} view pairs, {} sessions, {} users with history",
        catalog.pairs.pairs.len(),
        catalog.sessions.len(),
        catalog.histories.len()
    );

    // Views of one item should sit closer to each other than to another item's view.
    let same = cosine(&catalog.view_feature(0, 0), &catalog.view_feature(0, 1));
    let other = cosine(&catalog.view_feature(0, 0), &catalog.view_feature(1, 0));
    println!("cosine between views of item 0: {same:.3}; item 0 vs item 1: {other:.3}");

    let s = &catalog.sessions[0];
    println!(
        "session 0: user {} bought item {} against {} negatives",
        s.user_id,
        s.purchased,
        s.negatives().len()
    );
    Ok(())
}
