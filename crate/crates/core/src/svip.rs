//! Selective visual prompt fusion.
//!
//! From the global image feature `V` a two-layer MLP produces a condition
//! `C` and a sigmoid gate produces weights `A`, both `M x d`. The first `M`
//! prompt tokens become `p_i + c_i * a_i`; the remaining tokens are
//! untouched.
//!
//! [`MetaNet`] is the indiscriminate baseline: one condition vector added
//! to every prompt token.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Result, ScingError};
use crate::nn::{Binder, Linear, Param, Parameters};
use crate::tensor::Tensor;

/// Init scale of the condition MLP's output layer, relative to fan-in.
const CONDITION_INIT_SCALE: f64 = 1.0;
const GATE_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct SvipParams {
    pub fused: usize,
    pub dim: usize,
    pub mlp_fc1: Linear,
    pub mlp_fc2: Linear,
    /// `W_s`, `D x (M d)`.
    pub gate_w: Param,
    /// `b_s`, `1 x (M d)`.
    pub gate_b: Param,
}

impl SvipParams {
    /// `feature_dim` is `D`, `fused` is `M`, `dim` is `d`.
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, fused: usize, dim: usize, rng: &mut R) -> Self {
        let hidden = (feature_dim / 2).max(1);
        SvipParams {
            fused,
            dim,
            mlp_fc1: Linear::new("svip.mlp.fc1", feature_dim, hidden, true, 1.0, rng),
            mlp_fc2: Linear::new(
                "svip.mlp.fc2",
                hidden,
                fused * dim,
                true,
                CONDITION_INIT_SCALE,
                rng,
            ),
            gate_w: Param::new(
                "svip.gate.W",
                Tensor::randn(
                    feature_dim,
                    fused * dim,
                    GATE_INIT_SCALE / (feature_dim as f64).sqrt(),
                    rng,
                ),
            ),
            gate_b: Param::new("svip.gate.b", Tensor::zeros(1, fused * dim)),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.gate_w.value.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_fc1.output_dim()
    }

    fn check_feature(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.feature_dim() {
            return Err(ScingError::shape("svip feature V", self.feature_dim(), v.len()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(ScingError::Numeric("visual feature V is not finite".into()));
        }
        Ok(())
    }

    /// `C = reshape(MLP(V), M x d)` as a graph node; `v` is `1 x D`.
    pub fn condition_var(&self, g: &mut Graph, b: &mut Binder, v: Var) -> Var {
        let h = self.mlp_fc1.forward(g, b, v);
        let h = g.relu(h);
        let c = self.mlp_fc2.forward(g, b, h);
        g.reshape(c, self.fused, self.dim)
    }

    /// `A = reshape(sigmoid(V W_s + b_s), M x d)` as a graph node.
    pub fn gate_var(&self, g: &mut Graph, b: &mut Binder, v: Var) -> Var {
        let w = b.bind(g, &self.gate_w);
        let bias = b.bind(g, &self.gate_b);
        let z = g.matmul(v, w);
        let z = g.add_row(z, bias);
        let a = g.sigmoid(z);
        g.reshape(a, self.fused, self.dim)
    }

    pub fn visual_condition(&self, v: &[f64]) -> Result<Tensor> {
        self.check_feature(v)?;
        let mut g = Graph::new();
        let mut b = Binder::frozen();
        let x = g.constant(Tensor::row_vector(v.to_vec()));
        let c = self.condition_var(&mut g, &mut b, x);
        Ok(g.value(c).clone())
    }

    pub fn gate(&self, v: &[f64]) -> Result<Tensor> {
        self.check_feature(v)?;
        let mut g = Graph::new();
        let mut b = Binder::frozen();
        let x = g.constant(Tensor::row_vector(v.to_vec()));
        let a = self.gate_var(&mut g, &mut b, x);
        Ok(g.value(a).clone())
    }

    /// Fused head tokens for a given `P_k[0..M]` and feature `V`.
    pub fn fuse_head(&self, head: &Tensor, v: &[f64]) -> Result<Tensor> {
        let c = self.visual_condition(v)?;
        let a = self.gate(v)?;
        fuse(head, &c, &a)
    }
}

impl Parameters for SvipParams {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.mlp_fc1.params();
        v.extend(self.mlp_fc2.params());
        v.push(&self.gate_w);
        v.push(&self.gate_b);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.mlp_fc1.params_mut();
        v.extend(self.mlp_fc2.params_mut());
        v.push(&mut self.gate_w);
        v.push(&mut self.gate_b);
        v
    }
}

/// `p_i + c_i * a_i` elementwise over `M x d` operands.
pub fn fuse(head: &Tensor, condition: &Tensor, gate: &Tensor) -> Result<Tensor> {
    if head.shape() != condition.shape() || head.shape() != gate.shape() {
        return Err(ScingError::shape(
            "fuse",
            format!("{}x{} operands", head.rows(), head.cols()),
            format!(
                "condition {}x{}, gate {}x{}",
                condition.rows(),
                condition.cols(),
                gate.rows(),
                gate.cols()
            ),
        ));
    }
    let mut out = head.clone();
    for ((o, c), a) in out
        .as_mut_slice()
        .iter_mut()
        .zip(condition.as_slice())
        .zip(gate.as_slice())
    {
        *o += c * a;
    }
    Ok(out)
}

/// Graph version of [`fuse`].
pub fn fuse_var(g: &mut Graph, head: Var, condition: Var, gate: Var) -> Var {
    let weighted = g.mul(condition, gate);
    g.add(head, weighted)
}

/// The CoCoOp-style meta-net: `c = MLP(x_g) in R^d`, added to every token.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaNet {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MetaNet {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, dim: usize, rng: &mut R) -> Self {
        let hidden = (feature_dim / 2).max(1);
        MetaNet {
            fc1: Linear::new("metanet.fc1", feature_dim, hidden, true, 1.0, rng),
            fc2: Linear::new("metanet.fc2", hidden, dim, true, CONDITION_INIT_SCALE, rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.fc1.input_dim()
    }

    /// `1 x d` condition node.
    pub fn condition_var(&self, g: &mut Graph, b: &mut Binder, v: Var) -> Var {
        let h = self.fc1.forward(g, b, v);
        let h = g.relu(h);
        self.fc2.forward(g, b, h)
    }

    pub fn condition(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.feature_dim() {
            return Err(ScingError::shape("metanet feature", self.feature_dim(), v.len()));
        }
        let mut g = Graph::new();
        let mut b = Binder::frozen();
        let x = g.constant(Tensor::row_vector(v.to_vec()));
        let c = self.condition_var(&mut g, &mut b, x);
        Ok(g.value(c).as_slice().to_vec())
    }
}

impl Parameters for MetaNet {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v
    }
}

/// Adds `c` to each of the `L` rows of `prompts`.
pub fn broadcast_add(prompts: &Tensor, c: &[f64]) -> Result<Tensor> {
    if c.len() != prompts.cols() {
        return Err(ScingError::shape("cocoop condition", prompts.cols(), c.len()));
    }
    let mut out = prompts.clone();
    for r in 0..out.rows() {
        for (o, x) in out.row_mut(r).iter_mut().zip(c) {
            *o += x;
        }
    }
    Ok(out)
}

/// Meta-net fusion: `p_i(I) = p_i + MLP(x_g)` for every token.
pub fn cocoop_fuse(meta: &MetaNet, prompts: &Tensor, global: &[f64]) -> Result<Tensor> {
    let c = meta.condition(global)?;
    broadcast_add(prompts, &c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream;

    fn params() -> SvipParams {
        SvipParams::new(6, 2, 4, &mut stream(1, "svip", &[]))
    }

    fn feature(seed: u64) -> Vec<f64> {
        Tensor::randn(1, 6, 1.0, &mut stream(seed, "v", &[])).into_vec()
    }

    /// Straight-line two-layer perceptron, independent of the graph.
    fn mlp_oracle(fc1: &Linear, fc2: &Linear, v: &[f64]) -> Vec<f64> {
        let affine = |lin: &Linear, x: &[f64]| -> Vec<f64> {
            let w = &lin.weight.value;
            (0..w.cols())
                .map(|j| {
                    let mut s = lin.bias.as_ref().map_or(0.0, |b| b.value.get(0, j));
                    for (i, xi) in x.iter().enumerate() {
                        s += xi * w.get(i, j);
                    }
                    s
                })
                .collect()
        };
        let h: Vec<f64> = affine(fc1, v).into_iter().map(|x| x.max(0.0)).collect();
        affine(fc2, &h)
    }

    #[test]
    fn zero_mlp_gives_zero_condition() {
        let mut p = params();
        for param in [&mut p.mlp_fc1.weight, &mut p.mlp_fc2.weight] {
            param.value.scale_assign(0.0);
        }
        let c = p.visual_condition(&feature(2)).unwrap();
        assert_eq!(c.shape(), (2, 4));
        assert!(c.as_slice().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn zero_second_layer_returns_bias() {
        let mut p = params();
        p.mlp_fc2.weight.value.scale_assign(0.0);
        let bias: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        p.mlp_fc2.bias.as_mut().unwrap().value = Tensor::row_vector(bias.clone());
        for s in 0..3 {
            let c = p.visual_condition(&feature(s)).unwrap();
            assert_eq!(c.as_slice(), bias.as_slice());
        }
    }

    #[test]
    fn condition_matches_oracle() {
        let mut p = params();
        let mut rng = stream(4, "bias", &[]);
        p.mlp_fc1.bias.as_mut().unwrap().value = Tensor::randn(1, 3, 0.5, &mut rng);
        p.mlp_fc2.bias.as_mut().unwrap().value = Tensor::randn(1, 8, 0.5, &mut rng);
        let v = feature(5);
        let c = p.visual_condition(&v).unwrap();
        let expect = mlp_oracle(&p.mlp_fc1, &p.mlp_fc2, &v);
        for (a, b) in c.as_slice().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn gate_cases() {
        let mut p = params();
        let v = feature(6);
        // random case vs sigmoid-affine oracle
        let a = p.gate(&v).unwrap();
        let w = &p.gate_w.value;
        for j in 0..8 {
            let z: f64 = (0..6).map(|i| v[i] * w.get(i, j)).sum::<f64>() + p.gate_b.value.get(0, j);
            let expect = 1.0 / (1.0 + (-z).exp());
            assert!((a.as_slice()[j] - expect).abs() < 1e-10);
        }
        p.gate_w.value.scale_assign(0.0);
        assert!(p.gate(&v).unwrap().as_slice().iter().all(|x| *x == 0.5));
        p.gate_b.value = Tensor::full(1, 8, 20.0);
        assert!(p.gate(&v).unwrap().as_slice().iter().all(|x| *x > 0.999999));
    }

    #[test]
    fn fuse_cases() {
        let p = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let a = Tensor::from_rows(&[vec![0.5, 0.25]]).unwrap();
        assert_eq!(fuse(&p, &c, &a).unwrap().as_slice(), &[2.5, 3.0]);
        assert_eq!(fuse(&p, &c, &Tensor::zeros(1, 2)).unwrap(), p);
        assert_eq!(fuse(&p, &c, &Tensor::full(1, 2, 1.0)).unwrap().as_slice(), &[4.0, 6.0]);
        assert!(matches!(
            fuse(&p, &c, &Tensor::zeros(2, 2)),
            Err(ScingError::Shape { .. })
        ));
    }

    #[test]
    fn feature_checks() {
        let p = params();
        assert!(matches!(p.gate(&[0.0; 5]), Err(ScingError::Shape { .. })));
        assert!(matches!(
            p.visual_condition(&[f64::NAN; 6]),
            Err(ScingError::Numeric(_))
        ));
    }

    #[test]
    fn cocoop_cases() {
        let meta = MetaNet::new(6, 4, &mut stream(2, "meta", &[]));
        let prompts = Tensor::randn(3, 4, 1.0, &mut stream(3, "p", &[]));
        assert_eq!(broadcast_add(&prompts, &[0.0; 4]).unwrap(), prompts);
        let shifted = broadcast_add(&prompts, &[1.0; 4]).unwrap();
        for (a, b) in shifted.as_slice().iter().zip(prompts.as_slice()) {
            assert!((a - b - 1.0).abs() < 1e-15);
        }
        let v = feature(7);
        let out = cocoop_fuse(&meta, &prompts, &v).unwrap();
        let c = mlp_oracle(&meta.fc1, &meta.fc2, &v);
        for r in 0..3 {
            for j in 0..4 {
                assert!((out.get(r, j) - prompts.get(r, j) - c[j]).abs() < 1e-10);
            }
        }
        assert!(cocoop_fuse(&meta, &Tensor::zeros(3, 5), &v).is_err());
    }
}
