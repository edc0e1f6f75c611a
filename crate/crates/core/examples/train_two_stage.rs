//! Both training stages on a tiny benchmark, printing the epoch means.

use scing::config::Config;
use scing::data::{generate_dataset, Dataset, GenerationParams};
use scing::trainer::run_pipeline;

fn tiny_config(root: &std::path::Path) -> Config {
    let mut cfg = Config::default();
    cfg.data.train_identities = 8;
    cfg.data.eval_identities = 4;
    cfg.data.images_per_id_per_cam = 4;
    cfg.optim.ids_per_batch = 4;
    cfg.optim.images_per_id = 2;
    cfg.optim.stage1_epochs = 3;
    cfg.optim.stage2_epochs = 3;
    cfg.run.out_dir = root.join("run");
    cfg
}

fn main() -> scing::error::Result<()> {
    let root = std::env::temp_dir().join("scing-demo-train");
    let cfg = tiny_config(&root);
    let data = Dataset::from_manifest(generate_dataset(&GenerationParams::from_config(&cfg), &root.join("data"))?)?;

    let (s1, s2) = run_pipeline(&cfg, &data)?;
    for e in s1.epochs.iter().chain(&s2.epochs) {
        let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "stage {} epoch {} lr {:.1e}: l_clip {} l_con {} l_ce {} l_trp {}",
            e.stage,
            e.epoch,
            e.lr,
            show(e.l_clip),
            show(e.l_con),
            show(e.l_ce),
            show(e.l_trp)
        );
    }
    println!("tau after stage 1: {:.4}", s1.model.tau());
    println!("checkpoints: {} {}", s1.checkpoint_path.display(), s2.checkpoint_path.display());
    Ok(())
}
