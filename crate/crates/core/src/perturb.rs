//! The stochastic perturbation `T(.)`: image-level flip, crop, erase and
//! occlusion, plus feature-level inverted dropout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScingError};
use crate::imaging::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub flip_prob: f64,
    pub erase_prob: f64,
    /// Erased area as a fraction of the image, drawn uniformly.
    pub erase_area: [f64; 2],
    /// Height/width ratio of the erased rectangle, drawn log-uniformly.
    pub erase_aspect: [f64; 2],
    pub crop_prob: f64,
    /// Kept area fraction of the crop window.
    pub crop_scale: [f64; 2],
    pub occlusion_prob: f64,
    pub occlusion_area: [f64; 2],
    pub feature_dropout: f64,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            flip_prob: 0.5,
            erase_prob: 0.5,
            erase_area: [0.02, 0.33],
            erase_aspect: [0.3, 3.3],
            crop_prob: 0.5,
            crop_scale: [0.8, 1.0],
            occlusion_prob: 0.5,
            occlusion_area: [0.2, 0.5],
            feature_dropout: 0.5,
            seed: 0,
        }
    }
}

impl PerturbConfig {
    /// Every transform disabled.
    pub fn identity() -> Self {
        PerturbConfig {
            flip_prob: 0.0,
            erase_prob: 0.0,
            crop_prob: 0.0,
            occlusion_prob: 0.0,
            feature_dropout: 0.0,
            ..PerturbConfig::default()
        }
    }

    /// The same transforms with occlusion switched off.
    pub fn without_occlusion(&self) -> Self {
        PerturbConfig {
            occlusion_prob: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("flip_prob", self.flip_prob),
            ("erase_prob", self.erase_prob),
            ("crop_prob", self.crop_prob),
            ("occlusion_prob", self.occlusion_prob),
            ("feature_dropout", self.feature_dropout),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(ScingError::Config(format!("perturb.{name}={p} is not in [0, 1]")));
            }
        }
        let ranges = [
            ("erase_area", self.erase_area),
            ("crop_scale", self.crop_scale),
            ("occlusion_area", self.occlusion_area),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(ScingError::Config(format!(
                    "perturb.{name}=[{lo}, {hi}] must satisfy 0 < lo <= hi <= 1"
                )));
            }
        }
        let [a, b] = self.erase_aspect;
        if !(a > 0.0 && a <= b) {
            return Err(ScingError::Config(format!(
                "perturb.erase_aspect=[{a}, {b}] must satisfy 0 < lo <= hi"
            )));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn fires<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    // one draw per transform regardless of p keeps streams aligned
    let u: f64 = rng.random();
    u < p
}

/// Rectangle of roughly `area` pixels with height/width ratio `aspect`,
/// clamped to at least 1x1 and at most the image.
fn rect_dims(height: usize, width: usize, area: f64, aspect: f64) -> (usize, usize) {
    let h = (area * aspect).sqrt().round() as usize;
    let w = (area / aspect).sqrt().round() as usize;
    (h.clamp(1, height), w.clamp(1, width))
}

/// Applies flip, crop-and-resize, erase and occlusion in that order, each
/// fired by its own draw. The output has the input's dimensions.
pub fn perturb_image<R: Rng + ?Sized>(image: &Image, config: &PerturbConfig, rng: &mut R) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();

    if fires(rng, config.flip_prob) {
        out = out.flip_horizontal();
    }

    if fires(rng, config.crop_prob) {
        let side = uniform(rng, config.crop_scale).sqrt();
        let ch = ((h as f64 * side).round() as usize).clamp(1, h);
        let cw = ((w as f64 * side).round() as usize).clamp(1, w);
        let y0 = rng.random_range(0..=h - ch);
        let x0 = rng.random_range(0..=w - cw);
        out = out.crop_resize(y0, x0, ch, cw);
    }

    if fires(rng, config.erase_prob) {
        let area = uniform(rng, config.erase_area) * (h * w) as f64;
        let [a, b] = config.erase_aspect;
        let aspect = uniform(rng, [a.ln(), b.ln()]).exp();
        let (eh, ew) = rect_dims(h, w, area, aspect);
        let y0 = rng.random_range(0..=h - eh);
        let x0 = rng.random_range(0..=w - ew);
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                let noise = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
                out.set_pixel(y, x, noise);
            }
        }
    }

    if fires(rng, config.occlusion_prob) {
        let area = uniform(rng, config.occlusion_area);
        occlude(&mut out, area, rng);
    }
    out
}

/// Pastes a solid rectangle covering about `area` of the image, anchored to
/// a random image edge like a foreground object.
pub fn occlude<R: Rng + ?Sized>(image: &mut Image, area: f64, rng: &mut R) {
    let (h, w) = (image.height(), image.width());
    let color = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
    let pixels = area * (h * w) as f64;
    match rng.random_range(0..3u8) {
        // bottom band
        0 => {
            let rh = ((pixels / w as f64).round() as usize).clamp(1, h);
            image.fill_rect(h - rh, 0, rh, w, color);
        }
        // left or right block
        side => {
            let rw = ((pixels / h as f64).round() as usize).clamp(1, w);
            let rh = h;
            let x0 = if side == 1 { 0 } else { w - rw };
            image.fill_rect(0, x0, rh, rw, color);
        }
    }
}

/// Inverted dropout: zeroes each coordinate with probability `p` and scales
/// survivors by `1/(1-p)`.
pub fn feature_dropout<R: Rng + ?Sized>(v: &[f64], p: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(ScingError::Config(format!("dropout rate {p} is not in [0, 1]")));
    }
    if p == 0.0 {
        return Ok(v.to_vec());
    }
    if p == 1.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let keep = 1.0 / (1.0 - p);
    Ok(v
        .iter()
        .map(|x| {
            let u: f64 = rng.random();
            if u < p { 0.0 } else { x * keep }
        })
        .collect())
}
