//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates forward values (every input is inserted
//! as a constant), so it is independent of the backward implementation it
//! checks.

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over inputs of `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)`.
    pub max_rel_error: f64,
    /// Largest elementwise absolute difference.
    pub max_abs_error: f64,
    /// Per-input relative errors, in input order.
    pub per_input: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Central differences of a scalar function of a flat point.
pub fn finite_difference<F>(f: F, point: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + eps;
            let plus = f(&x);
            x[i] = point[i] - eps;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Relative error between two gradient vectors, in the L2 sense.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Compares reverse-mode gradients of `build` against central differences.
///
/// `build` receives one [`Var`] per input and must return a `1 x 1` node.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);

    let eval = |values: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut max_abs: f64 = 0.0;
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[idx])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.rows(), input.cols()));
        let numeric = finite_difference(
            |flat| {
                let mut values = inputs.to_vec();
                values[idx] = Tensor::from_vec(input.rows(), input.cols(), flat.to_vec())
                    .expect("same shape");
                eval(&values)
            },
            input.as_slice(),
            eps,
        );
        for (a, n) in analytic.as_slice().iter().zip(&numeric) {
            max_abs = max_abs.max((a - n).abs());
        }
        per_input.push(relative_error(analytic.as_slice(), &numeric));
    }
    GradCheckReport {
        max_rel_error: per_input.iter().cloned().fold(0.0, f64::max),
        max_abs_error: max_abs,
        per_input,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_central_difference() {
        let f = |v: &[f64]| v[0] * v[0] + 3.0 * v[0] * v[1];
        let g = finite_difference(f, &[2.0, -1.0], 1e-6);
        assert!((g[0] - 1.0).abs() < 1e-6); // 2x + 3y
        assert!((g[1] - 6.0).abs() < 1e-6); // 3x
    }

    #[test]
    fn relative_error_of_equal_vectors_is_zero() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!(relative_error(&[1.0, 0.0], &[0.0, 1.0]) > 1.0);
    }
}
