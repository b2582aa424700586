//! Render a random table, print its HTML, cell polygons and generated
//! questions, and save the page.
//!
//!     cargo run --example render_table [seed] [out.png]

use groundkie::datagen::{
    gen_qa_deterministic, random_table_spec, render_document, table_to_html, QaGenConfig,
    RenderConfig, TableGenConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> groundkie::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(3, |s| s.parse().expect("seed"));
    let out = std::env::args().nth(2).map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("table.png"));
    let cfg = TableGenConfig {
        warp_prob: 0.5,
        ..TableGenConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = random_table_spec(&mut rng, &cfg)?;
    let doc = render_document(&spec, seed, RenderConfig::default())?;
    println!("{}\n", table_to_html(&spec));
    println!("warped: {}", doc.warped);
    for c in doc.cells.iter().take(6) {
        let (x0, y0, x1, y1) = c.polygon.bounds();
        println!("cell ({}, {}) {:?} spans x {x0:.1}..{x1:.1}, y {y0:.1}..{y1:.1}", c.row, c.col, c.text);
    }
    println!();
    for qa in gen_qa_deterministic(&spec, &doc, seed, &QaGenConfig::default())? {
        println!(
            "[{}] {} -> {}{}",
            qa.qtype.as_str(),
            qa.question,
            qa.answer,
            qa.logical_loc.map_or(String::new(), |(r, c)| format!("  @ ({r}, {c})"))
        );
    }
    doc.image.save(&out)?;
    println!("\npage written to {}", out.display());
    Ok(())
}
