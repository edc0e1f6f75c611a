//! Training objectives: label-aware image-text contrastive loss, zero-shot
//! probabilities, the three-view consistency loss, identity cross-entropy
//! against frozen text embeddings, and the cross-modal triplet loss.
//!
//! Each loss has a plain value form over slices and a graph form used by the
//! trainer.

use serde::{Deserialize, Serialize};

use crate::autograd::{log_sum_exp, Graph, Var};
use crate::error::{Result, ScingError};
use crate::tensor::Tensor;

/// Sign of the triplet hinge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletOrientation {
    /// `max(neg - pos + margin, 0)`.
    #[default]
    Corrected,
    /// `max(pos - neg + margin, 0)`.
    AsPrinted,
}

/// How the negative of a triplet is chosen among other identities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSelection {
    /// Most similar wrong-identity feature.
    #[default]
    Argmax,
    /// Least similar wrong-identity feature.
    Argmin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Consistency weight.
    pub lambda: f64,
    /// Triplet weight.
    pub gamma: f64,
    pub margin: f64,
    pub triplet_orientation: TripletOrientation,
    pub negative_selection: NegativeSelection,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 3.0,
            gamma: 1.0,
            margin: 0.2,
            triplet_orientation: TripletOrientation::Corrected,
            negative_selection: NegativeSelection::Argmax,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma), ("margin", self.margin)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ScingError::Config(format!("losses.{name}={v} must be >= 0")));
            }
        }
        Ok(())
    }
}

fn check_finite(what: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(ScingError::Numeric(format!("{what} contains non-finite values")));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero vectors are a numeric error.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(ScingError::shape("cosine", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(ScingError::Numeric("cosine of a zero vector is undefined".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// `M[i][j] = 1/|P(i)|` where `P(i)` holds the indices sharing `labels[i]`.
fn positive_weights(labels: &[usize]) -> Tensor {
    let n = labels.len();
    let mut m = Tensor::zeros(n, n);
    for i in 0..n {
        let count = labels.iter().filter(|l| **l == labels[i]).count() as f64;
        for j in 0..n {
            if labels[j] == labels[i] {
                m.set(i, j, 1.0 / count);
            }
        }
    }
    m
}

/// Symmetric image-to-text and text-to-image cross-entropy over
/// `scale * <g_i, w_j>`. Each anchor averages its log-softmax over every
/// batch entry of the same identity; the total is divided by `2N`.
pub fn clip_contrastive(g: &Tensor, w: &Tensor, labels: &[usize], scale: f64) -> Result<f64> {
    let n = labels.len();
    if g.shape() != w.shape() || g.rows() != n {
        return Err(ScingError::shape(
            "clip_contrastive",
            format!("{n} rows in both inputs"),
            format!("{}x{} and {}x{}", g.rows(), g.cols(), w.rows(), w.cols()),
        ));
    }
    if n == 0 {
        return Err(ScingError::Config("clip_contrastive needs N >= 1".into()));
    }
    check_finite("clip_contrastive image input", g.as_slice())?;
    check_finite("clip_contrastive text input", w.as_slice())?;
    let sim = g.matmul(&w.transpose())?.map(|x| x * scale);
    let weights = positive_weights(labels);
    let mut total = 0.0;
    for s in [sim.transpose(), sim] {
        for i in 0..n {
            let lse = log_sum_exp(s.row(i));
            for j in 0..n {
                let m = weights.get(i, j);
                if m > 0.0 {
                    total -= m * (s.get(i, j) - lse);
                }
            }
        }
    }
    Ok(total / (2 * n) as f64)
}

/// Graph form of [`clip_contrastive`]; `scale` is a `1 x 1` node.
pub fn clip_contrastive_var(gr: &mut Graph, g: Var, w: Var, labels: &[usize], scale: Var) -> Var {
    let n = labels.len();
    let sim = gr.matmul_t(g, w);
    let sim = gr.scale_by(sim, scale);
    let weights = gr.constant(positive_weights(labels));
    let i2t = gr.log_softmax(sim);
    let simt = gr.transpose(sim);
    let t2i = gr.log_softmax(simt);
    // the positive weights are symmetric in the label relation
    let a = gr.dot(i2t, weights);
    let b = gr.dot(t2i, weights);
    let total = gr.add(a, b);
    gr.scale(total, -1.0 / (2 * n) as f64)
}

/// Softmax over `<g, w_k> / tau`.
pub fn zero_shot_probs(g: &[f64], w: &Tensor, tau: f64) -> Result<Vec<f64>> {
    if w.rows() == 0 {
        return Err(ScingError::Config("zero_shot_probs needs K >= 1 classes".into()));
    }
    if w.cols() != g.len() {
        return Err(ScingError::shape("zero_shot_probs", w.cols(), g.len()));
    }
    let logits: Vec<f64> = (0..w.rows()).map(|k| dot(g, w.row(k)) / tau).collect();
    let lse = log_sum_exp(&logits);
    Ok(logits.iter().map(|l| (l - lse).exp()).collect())
}

/// `1 - (cos(w,w') + cos(w,w'') + cos(w',w''))/3`.
pub fn consistency_loss(w: &[f64], w1: &[f64], w2: &[f64]) -> Result<f64> {
    Ok(1.0 - mean_pairwise_cosine(w, w1, w2)?)
}

pub fn mean_pairwise_cosine(w: &[f64], w1: &[f64], w2: &[f64]) -> Result<f64> {
    Ok((cosine(w, w1)? + cosine(w, w2)? + cosine(w1, w2)?) / 3.0)
}

/// Batch graph form: rows of `a`, `b`, `c` are triples; returns the mean
/// consistency loss over rows.
pub fn consistency_var(gr: &mut Graph, a: Var, b: Var, c: Var) -> Var {
    let n = gr.value(a).rows();
    let a = gr.normalize_rows(a);
    let b = gr.normalize_rows(b);
    let c = gr.normalize_rows(c);
    let ab = gr.dot(a, b);
    let ac = gr.dot(a, c);
    let bc = gr.dot(b, c);
    let s = gr.add(ab, ac);
    let s = gr.add(s, bc);
    let mean_cos = gr.scale(s, 1.0 / (3 * n) as f64);
    let neg = gr.neg(mean_cos);
    let one = gr.constant(Tensor::scalar(1.0));
    gr.add(one, neg)
}

/// `-log softmax(scale * <g, w_k>)[y]`.
pub fn ce_loss(g: &[f64], w: &Tensor, y: usize, scale: f64) -> Result<f64> {
    if y >= w.rows() {
        return Err(ScingError::Index {
            what: "ce_loss class",
            index: y,
            len: w.rows(),
        });
    }
    if w.cols() != g.len() {
        return Err(ScingError::shape("ce_loss", w.cols(), g.len()));
    }
    let logits: Vec<f64> = (0..w.rows()).map(|k| scale * dot(g, w.row(k))).collect();
    Ok(log_sum_exp(&logits) - logits[y])
}

/// Mean cross-entropy over the rows of `g` against class matrix `w`.
pub fn ce_var(gr: &mut Graph, g: Var, w: Var, labels: &[usize], scale: Var) -> Var {
    let n = labels.len();
    let k = gr.value(w).rows();
    let logits = gr.matmul_t(g, w);
    let logits = gr.scale_by(logits, scale);
    let ls = gr.log_softmax(logits);
    let mut onehot = Tensor::zeros(n, k);
    for (i, y) in labels.iter().enumerate() {
        onehot.set(i, *y, 1.0);
    }
    let onehot = gr.constant(onehot);
    let picked = gr.dot(ls, onehot);
    gr.scale(picked, -1.0 / n as f64)
}

fn select_negative(
    sims: impl Iterator<Item = (usize, f64)>,
    selection: NegativeSelection,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, s) in sims {
        let better = match (best, selection) {
            (None, _) => true,
            (Some((_, b)), NegativeSelection::Argmax) => s > b,
            (Some((_, b)), NegativeSelection::Argmin) => s < b,
        };
        if better {
            best = Some((j, s));
        }
    }
    best.map(|(j, _)| j)
}

fn hinge(pos: f64, neg: f64, margin: f64, orientation: TripletOrientation) -> f64 {
    match orientation {
        TripletOrientation::Corrected => (neg - pos + margin).max(0.0),
        TripletOrientation::AsPrinted => (pos - neg + margin).max(0.0),
    }
}

/// Cross-modal triplet term for one anchor of identity `label`: positive is
/// `<g_k, w_k>`, negative is `<g_k, g_n>` for the selected wrong-identity
/// batch feature. Returns 0 with a warning when the batch has no negative.
#[allow(clippy::too_many_arguments)]
pub fn triplet_loss(
    g_k: &[f64],
    w_k: &[f64],
    label: usize,
    batch_g: &Tensor,
    labels: &[usize],
    margin: f64,
    orientation: TripletOrientation,
    selection: NegativeSelection,
) -> Result<f64> {
    if batch_g.rows() != labels.len() {
        return Err(ScingError::shape("triplet_loss labels", batch_g.rows(), labels.len()));
    }
    if batch_g.cols() != g_k.len() || w_k.len() != g_k.len() {
        return Err(ScingError::shape("triplet_loss width", g_k.len(), batch_g.cols()));
    }
    let sims = (0..labels.len())
        .filter(|j| labels[*j] != label)
        .map(|j| (j, dot(g_k, batch_g.row(j))));
    let Some(n) = select_negative(sims, selection) else {
        log::warn!("triplet_loss: no negative for identity {label} in batch");
        return Ok(0.0);
    };
    let pos = dot(g_k, w_k);
    let neg = dot(g_k, batch_g.row(n));
    Ok(hinge(pos, neg, margin, orientation))
}

/// Batch graph form: anchors are the rows of `g` with targets the rows of
/// `w` (the text embedding of each row's identity). Averages over anchors
/// that have a negative.
pub fn triplet_var(
    gr: &mut Graph,
    g: Var,
    w: Var,
    labels: &[usize],
    weights: &LossWeights,
) -> Var {
    let n = labels.len();
    let d = gr.value(g).cols();
    let sims = gr.matmul_t(g, g);
    let mut select = Tensor::zeros(n, n);
    let mut valid = Tensor::zeros(n, 1);
    let mut count = 0usize;
    {
        let s = gr.value(sims);
        for i in 0..n {
            let cands = (0..n)
                .filter(|j| labels[*j] != labels[i])
                .map(|j| (j, s.get(i, j)));
            if let Some(j) = select_negative(cands, weights.negative_selection) {
                select.set(i, j, 1.0);
                valid.set(i, 0, 1.0);
                count += 1;
            }
        }
    }
    if count == 0 {
        log::warn!("triplet loss: batch has a single identity, no negatives");
        return gr.constant(Tensor::scalar(0.0));
    }
    let select = gr.constant(select);
    let ones_n = gr.constant(Tensor::full(n, 1, 1.0));
    let picked = gr.mul(sims, select);
    let neg = gr.matmul(picked, ones_n);
    let gw = gr.mul(g, w);
    let ones_d = gr.constant(Tensor::full(d, 1, 1.0));
    let pos = gr.matmul(gw, ones_d);
    let diff = match weights.triplet_orientation {
        TripletOrientation::Corrected => gr.sub(neg, pos),
        TripletOrientation::AsPrinted => gr.sub(pos, neg),
    };
    let margin = gr.constant(Tensor::full(n, 1, weights.margin));
    let z = gr.add(diff, margin);
    let h = gr.relu(z);
    let valid = gr.constant(valid);
    let total = gr.dot(h, valid);
    gr.scale(total, 1.0 / count as f64)
}

/// `contrastive + lambda * consistency`.
pub fn stage1_loss(contrastive: f64, consistency: f64, lambda: f64) -> f64 {
    contrastive + lambda * consistency
}

/// `ce + gamma * trp`.
pub fn stage2_loss(ce: f64, trp: f64, gamma: f64) -> f64 {
    ce + gamma * trp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::seed::stream;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
        let mut t = Tensor::randn(n, d, 1.0, &mut stream(seed, "rows", &[]));
        for r in 0..n {
            let nr = norm(t.row(r));
            t.row_mut(r).iter_mut().for_each(|x| *x /= nr);
        }
        t
    }

    #[test]
    fn contrastive_closed_forms() {
        let g = unit_rows(1, 4, 1);
        assert_eq!(clip_contrastive(&g, &g, &[0], 1.0 / 0.07).unwrap(), 0.0);
        let u = unit_rows(1, 4, 2);
        let two = Tensor::vstack(&[&u, &u]).unwrap();
        let l = clip_contrastive(&two, &two, &[0, 1], 1.0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let bad = Tensor::full(2, 4, f64::NAN);
        assert!(matches!(
            clip_contrastive(&bad, &two, &[0, 1], 1.0),
            Err(ScingError::Numeric(_))
        ));
    }

    #[test]
    fn contrastive_matches_graph_form() {
        let g = unit_rows(6, 5, 3);
        let w = unit_rows(6, 5, 4);
        let labels = [0, 0, 1, 2, 2, 2];
        let value = clip_contrastive(&g, &w, &labels, 3.0).unwrap();
        let mut gr = Graph::new();
        let gv = gr.constant(g);
        let wv = gr.constant(w);
        let s = gr.constant(Tensor::scalar(3.0));
        let l = clip_contrastive_var(&mut gr, gv, wv, &labels, s);
        assert!((gr.value(l).item() - value).abs() < 1e-12);
    }

    #[test]
    fn zero_shot_cases() {
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = zero_shot_probs(&[1.0, 0.0], &w, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        let u = zero_shot_probs(&[0.0, 0.0], &w, 0.5).unwrap();
        assert!(u.iter().all(|x| (x - 0.5).abs() < 1e-15));
        assert!(zero_shot_probs(&[1.0], &Tensor::zeros(0, 1), 1.0).is_err());
    }

    #[test]
    fn consistency_cases() {
        let v = [0.3, -1.2, 2.0];
        assert!(consistency_loss(&v, &v, &v).unwrap().abs() < 1e-15);
        let l = consistency_loss(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(l, 1.0);
        let l = consistency_loss(&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]).unwrap();
        assert!((l - 4.0 / 3.0).abs() < 1e-15);
        assert!(consistency_loss(&[0.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn ce_and_triplet_cases() {
        let w = Tensor::full(4, 3, 0.5);
        assert!((ce_loss(&[0.1, 0.2, 0.3], &w, 2, 10.0).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            ce_loss(&[0.0; 3], &w, 4, 1.0),
            Err(ScingError::Index { .. })
        ));
        // anchor e0; positive target with cosine p, negative with cosine q
        let at = |c: f64| vec![c, (1.0 - c * c).sqrt()];
        let run = |p: f64, q: f64| {
            let batch = Tensor::from_rows(&[at(q)]).unwrap();
            triplet_loss(
                &[1.0, 0.0],
                &at(p),
                0,
                &batch,
                &[1],
                0.2,
                TripletOrientation::Corrected,
                NegativeSelection::Argmax,
            )
            .unwrap()
        };
        assert!(run(0.9, 0.5).abs() < 1e-12);
        assert!((run(0.5, 0.5) - 0.2).abs() < 1e-12);
        assert!((run(0.3, 0.6) - 0.5).abs() < 1e-12);
        let lone = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let none = triplet_loss(
            &[1.0, 0.0],
            &[1.0, 0.0],
            3,
            &lone,
            &[3],
            0.2,
            TripletOrientation::Corrected,
            NegativeSelection::Argmax,
        );
        assert_eq!(none.unwrap(), 0.0);
    }

    #[test]
    fn triplet_graph_matches_value_form() {
        let g = unit_rows(6, 4, 8);
        let w = unit_rows(6, 4, 9);
        let labels = [0, 0, 1, 1, 2, 2];
        for orientation in [TripletOrientation::Corrected, TripletOrientation::AsPrinted] {
            for selection in [NegativeSelection::Argmax, NegativeSelection::Argmin] {
                let weights = LossWeights {
                    margin: 0.3,
                    triplet_orientation: orientation,
                    negative_selection: selection,
                    ..LossWeights::default()
                };
                let mut expect = 0.0;
                for i in 0..6 {
                    expect += triplet_loss(
                        g.row(i),
                        w.row(i),
                        labels[i],
                        &g,
                        &labels,
                        0.3,
                        orientation,
                        selection,
                    )
                    .unwrap();
                }
                expect /= 6.0;
                let mut gr = Graph::new();
                let gv = gr.constant(g.clone());
                let wv = gr.constant(w.clone());
                let l = triplet_var(&mut gr, gv, wv, &labels, &weights);
                assert!((gr.value(l).item() - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn combined_losses() {
        assert_eq!(stage1_loss(0.7, 5.0, 0.0), 0.7);
        assert_eq!(stage1_loss(1.0, 0.5, 2.0), 2.0);
        assert_eq!(stage2_loss(0.9, 3.0, 0.0), 0.9);
        assert!((stage2_loss(1.0, 0.4, 0.5) - 1.2).abs() < 1e-15);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let labels = [0, 1, 1, 2];
        let inputs = [
            Tensor::randn(4, 5, 1.0, &mut stream(1, "gc", &[])),
            Tensor::randn(4, 5, 1.0, &mut stream(2, "gc", &[])),
            Tensor::randn(4, 5, 1.0, &mut stream(3, "gc", &[])),
            Tensor::scalar(2.5),
        ];
        let report = check_gradients(&inputs, 1e-5, |gr, v| {
            let g = gr.normalize_rows(v[0]);
            let w = gr.normalize_rows(v[1]);
            let c = clip_contrastive_var(gr, g, w, &labels, v[3]);
            let con = consistency_var(gr, v[0], v[1], v[2]);
            let ce = ce_var(gr, g, w, &labels, v[3]);
            let trp = triplet_var(gr, g, w, &labels, &LossWeights::default());
            let s = gr.add(c, con);
            let s = gr.add(s, ce);
            gr.add(s, trp)
        });
        assert!(report.passes(1e-6), "{report:?}");
    }
}
