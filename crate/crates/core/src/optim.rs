//! Adam with L2 weight decay and the step learning-rate schedule.

use std::collections::BTreeMap;

use crate::nn::{Param, ParamGrads};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &crate::config::OptimConfig) -> Self {
        Adam::new(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn update(&mut self, params: Vec<&mut Param>, grads: &ParamGrads, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params {
            let Some(grad) = grads.get(&p.name) else {
                continue;
            };
            let (rows, cols) = p.value.shape();
            let m = self
                .m
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(rows, cols));
            let v = self
                .v
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(rows, cols));
            let values = p.value.as_mut_slice();
            for (((x, g), mi), vi) in values
                .iter_mut()
                .zip(grad.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                let g = g + self.weight_decay * *x;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales reference milestones to a run of `epochs` epochs:
/// `max(1, floor(m * epochs / reference))`, deduplicated.
pub fn scale_milestones(milestones: &[usize], reference: usize, epochs: usize) -> Vec<usize> {
    let mut out: Vec<usize> = milestones
        .iter()
        .map(|m| (m * epochs / reference).max(1))
        .collect();
    out.dedup();
    out
}

/// `base * decay^(number of milestones <= epoch)`.
pub fn lr_at(base: f64, decay: f64, milestones: &[usize], epoch: usize) -> f64 {
    let passed = milestones.iter().filter(|m| **m <= epoch).count();
    base * decay.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn milestone_scaling() {
        assert_eq!(scale_milestones(&[30, 50], 120, 120), vec![30, 50]);
        assert_eq!(scale_milestones(&[30, 50], 120, 20), vec![5, 8]);
        assert_eq!(scale_milestones(&[30, 50], 120, 2), vec![1]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Param::new("x", Tensor::row_vector(vec![1.0, -2.0]));
        let mut grads = ParamGrads::default();
        grads.accumulate("x", &Tensor::row_vector(vec![0.5, -3.0]));
        let mut opt = Adam::new(0.9, 0.999, 1e-12, 0.0);
        opt.update(vec![&mut p], &grads, 0.1);
        // bias-corrected first step is lr * sign(g)
        assert!((p.value.get(0, 0) - 0.9).abs() < 1e-9);
        assert!((p.value.get(0, 1) + 1.9).abs() < 1e-9);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn params_without_gradients_are_untouched() {
        let mut p = Param::new("frozen", Tensor::row_vector(vec![1.0]));
        let mut opt = Adam::new(0.9, 0.999, 1e-8, 0.1);
        opt.update(vec![&mut p], &ParamGrads::default(), 1.0);
        assert_eq!(p.value.item(), 1.0);
        assert!(opt.m.is_empty());
    }
}
