//! Trains a tiny model, evaluates retrieval, and checks that the
//! image-encoder-only export scores identically.

use scing::config::Config;
use scing::data::{generate_dataset, Dataset, GenerationParams};
use scing::eval::{evaluate, export_inference, EvalOptions};
use scing::trainer::run_pipeline;

fn main() -> scing::error::Result<()> {
    let root = std::env::temp_dir().join("scing-demo-eval");
    let mut cfg = Config::default();
    cfg.data.train_identities = 8;
    cfg.data.eval_identities = 4;
    cfg.data.images_per_id_per_cam = 4;
    cfg.optim.ids_per_batch = 4;
    cfg.optim.images_per_id = 2;
    cfg.optim.stage1_epochs = 2;
    cfg.optim.stage2_epochs = 2;
    cfg.run.out_dir = root.join("run");
    let data = Dataset::from_manifest(generate_dataset(&GenerationParams::from_config(&cfg), &root.join("data"))?)?;
    let (_, s2) = run_pipeline(&cfg, &data)?;

    let opts = EvalOptions {
        extended_cmc: true,
        ..EvalOptions::default()
    };
    let full = evaluate(&s2.checkpoint, &data, opts)?;
    let export = export_inference(&s2.checkpoint);
    let lean = evaluate(&export, &data, opts)?;
    println!(
        "rank1 {:.3} rank5 {:.3} mAP {:.3} gap {:.3}",
        full.rank1,
        full.rank5.unwrap_or(f64::NAN),
        full.map,
        full.modality_gap.unwrap_or(f64::NAN)
    );
    println!(
        "parameters: full {} inference {} (image encoder {})",
        s2.checkpoint.param_count(),
        export.param_count(),
        s2.model.inference_param_count()
    );
    println!("export matches: {}", full.rank1 == lean.rank1 && full.map == lean.map);
    Ok(())
}
