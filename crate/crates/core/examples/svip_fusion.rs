//! Gated fusion of one image's feature into a class prompt: the gate
//! statistics, which tokens change, and the effect on the text embedding.

use scing::config::{Config, Fusion};
use scing::imaging::Image;
use scing::losses::cosine;
use scing::model::ScingModel;

fn main() -> scing::error::Result<()> {
    let cfg = Config::default();
    let model = ScingModel::new(&cfg, 4, 0)?;
    let mut img = Image::filled(64, 32, [0.3, 0.6, 0.4]);
    img.fill_rect(12, 8, 24, 16, [0.9, 0.1, 0.2]);
    img.fill_rect(36, 10, 24, 12, [0.1, 0.1, 0.7]);

    let feats = model.image.encode_image(&img)?;
    let gate = model.svip.gate(&feats.global)?;
    let (lo, hi) = gate
        .as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), a| (l.min(*a), h.max(*a)));
    println!("gate {}x{}: min {lo:.4} max {hi:.4}", gate.rows(), gate.cols());

    let class = 2;
    let tokens = model.prompts.tokens(class)?;
    let fused = model.svip.fuse_head(&tokens.slice_rows(0, cfg.prompts.fused), &feats.global)?;
    for i in 0..tokens.rows() {
        let before = tokens.row(i);
        let after = if i < fused.rows() { fused.row(i) } else { before };
        let shift: f64 = before.iter().zip(after).map(|(a, b)| (a - b).abs()).sum();
        println!("token {i}: |shift| {shift:.5}");
    }

    let raw = model.text_embedding(class, Fusion::Static, None)?;
    let conditioned = model.text_embedding(class, Fusion::Svip, Some(&feats.global))?;
    println!("cos(raw, conditioned) = {:.6}", cosine(&raw, &conditioned)?);
    println!("cos(image, raw)         = {:.4}", cosine(&feats.descriptor, &raw)?);
    println!("cos(image, conditioned) = {:.4}", cosine(&feats.descriptor, &conditioned)?);
    Ok(())
}
