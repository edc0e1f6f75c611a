//! Two perturbed views of one image, their conditioned text embeddings,
//! and the three-view consistency loss.

use scing::config::{Config, Fusion};
use scing::imaging::Image;
use scing::losses::{consistency_loss, mean_pairwise_cosine};
use scing::model::ScingModel;
use scing::perturb::{feature_dropout, perturb_image};
use scing::seed::stream;

fn main() -> scing::error::Result<()> {
    let cfg = Config::default();
    let model = ScingModel::new(&cfg, 3, 1)?;
    let mut img = Image::filled(64, 32, [0.5, 0.5, 0.5]);
    img.fill_rect(10, 6, 30, 20, [0.8, 0.2, 0.1]);

    let class = 0;
    let clean = model.image.encode_image(&img)?;
    let w = model.text_embedding(class, Fusion::Svip, Some(&clean.global))?;
    let mut views = Vec::new();
    for k in 0..2u64 {
        let mut rng = stream(3, "example.view", &[k]);
        let view = perturb_image(&img, &cfg.perturb, &mut rng);
        println!("view {k}: {} pixels changed", view.count_changed_pixels(&img));
        let v = feature_dropout(&model.image.encode_image(&view)?.global, cfg.perturb.feature_dropout, &mut rng)?;
        views.push(model.text_embedding(class, Fusion::Svip, Some(&v))?);
    }
    println!("L_con     = {:.6}", consistency_loss(&w, &views[0], &views[1])?);
    println!("mean cos  = {:.6}", mean_pairwise_cosine(&w, &views[0], &views[1])?);
    Ok(())
}
