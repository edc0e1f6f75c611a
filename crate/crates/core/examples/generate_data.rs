//! Renders a small synthetic benchmark and prints its split summary.
//!
//! `cargo run --example generate_data -- /tmp/scing-demo`

use std::path::PathBuf;

use scing::config::Config;
use scing::data::{generate_dataset, GenerationParams};

fn main() -> scing::error::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("scing-demo-data"));
    let mut cfg = Config::default();
    cfg.data.train_identities = 12;
    cfg.data.eval_identities = 6;
    cfg.data.images_per_id_per_cam = 6;

    let manifest = generate_dataset(&GenerationParams::from_config(&cfg), &out)?;
    println!("{}", manifest.summary());
    for row in manifest.rows.iter().filter(|r| r.occluded).take(3) {
        println!("occluded {} (identity {}, camera {})", row.path, row.identity, row.camera);
    }
    println!("written to {}", out.display());
    Ok(())
}
