//! A one-seed, short-schedule pass of the four-variant ablation.

use scing::ablation::{run_ablation, AblationOptions, Variant};
use scing::config::Config;
use scing::data::{generate_dataset, Dataset, GenerationParams};

fn main() -> scing::error::Result<()> {
    let root = std::env::temp_dir().join("scing-demo-ablation");
    let mut cfg = Config::default();
    cfg.data.train_identities = 8;
    cfg.data.eval_identities = 4;
    cfg.data.images_per_id_per_cam = 4;
    cfg.optim.ids_per_batch = 4;
    cfg.optim.images_per_id = 2;
    cfg.optim.stage1_epochs = 2;
    cfg.optim.stage2_epochs = 2;
    let data = Dataset::from_manifest(generate_dataset(&GenerationParams::from_config(&cfg), &root.join("data"))?)?;

    let table = run_ablation(
        &cfg,
        &data,
        &AblationOptions {
            seeds: vec![0],
            variants: Variant::ALL.to_vec(),
            out_dir: root.join("out"),
            parallel: false,
        },
    )?;
    for r in &table.rows {
        println!(
            "{:<10} rank1 {:.3} mAP {:.3} gap {:.4} mean_cos {:.4}",
            r.variant, r.rank1_mean, r.map_mean, r.modality_gap_mean, r.mean_cos_last_mean
        );
    }
    println!("tables and chart in {}", root.join("out").display());
    Ok(())
}
