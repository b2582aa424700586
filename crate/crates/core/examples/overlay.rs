//! Write a page with gold polygons in green and two offset "predictions" in
//! other colors.
//!
//!     cargo run --example overlay [out.png]

use groundkie::datagen::{generate_corpus, CorpusConfig, QaSource};
use groundkie::eval::overlay;
use groundkie::geometry::Point;

fn main() -> groundkie::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("overlay.png"));
    let cfg = CorpusConfig {
        count: 1,
        seed: 9,
        ..CorpusConfig::default()
    };
    let (docs, _) = generate_corpus(&cfg, QaSource::Deterministic)?;
    let doc = &docs[0];
    let gold: Vec<_> = doc.sample.cells.iter().take(2).map(|c| c.polygon).collect();
    let preds: Vec<[Point; 4]> = gold
        .iter()
        .map(|g| g.points().map(|p| Point::new(p.x + 3.0, p.y + 2.0)))
        .collect();
    overlay(&doc.sample.image, &gold, &preds).save(&out)?;
    println!("{} gold and {} predicted polygons drawn to {}", gold.len(), preds.len(), out.display());
    Ok(())
}
