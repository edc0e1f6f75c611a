//! Loss curves and an embedding projection from a short training run.

use scing::config::Config;
use scing::data::{generate_dataset, Dataset, GenerationParams};
use scing::eval::write_embedding_projection;
use scing::plot::plot_files;
use scing::trainer::{run_pipeline, EPOCH_LOG};

fn main() -> scing::error::Result<()> {
    let root = std::env::temp_dir().join("scing-demo-plot");
    let mut cfg = Config::default();
    cfg.data.train_identities = 8;
    cfg.data.eval_identities = 4;
    cfg.data.images_per_id_per_cam = 4;
    cfg.optim.ids_per_batch = 4;
    cfg.optim.images_per_id = 2;
    cfg.optim.stage1_epochs = 3;
    cfg.optim.stage2_epochs = 3;
    cfg.run.out_dir = root.join("run");
    let data = Dataset::from_manifest(generate_dataset(&GenerationParams::from_config(&cfg), &root.join("data"))?)?;
    let (s1, _) = run_pipeline(&cfg, &data)?;

    let projection = root.join("projection.csv");
    write_embedding_projection(&s1.model, &data, &projection)?;
    for p in plot_files(&[cfg.run.out_dir.join(EPOCH_LOG), projection], &root.join("plots"))? {
        println!("{}", p.display());
    }
    Ok(())
}
