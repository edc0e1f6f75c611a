//! Named parameters, graph binding, and the transformer building blocks
//! shared by both encoders.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// A named, trainable array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }
}

/// Anything that owns [`Param`]s.
pub trait Parameters {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

/// Which parameters receive gradients in a forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    All,
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn prefixes<I, S>(prefixes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Trainable::Prefixes(prefixes.into_iter().map(Into::into).collect())
    }

    pub fn contains(&self, name: &str) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::All => true,
            Trainable::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// Inserts parameters into a [`Graph`], once per name, and maps gradients
/// back to parameter names afterwards.
#[derive(Debug)]
pub struct Binder {
    trainable: Trainable,
    bound: HashMap<String, Var>,
    leaves: Vec<(String, Var)>,
}

impl Binder {
    pub fn new(trainable: Trainable) -> Self {
        Binder {
            trainable,
            bound: HashMap::new(),
            leaves: Vec::new(),
        }
    }

    pub fn frozen() -> Self {
        Binder::new(Trainable::Nothing)
    }

    pub fn bind(&mut self, g: &mut Graph, p: &Param) -> Var {
        if let Some(v) = self.bound.get(&p.name) {
            return *v;
        }
        let v = if self.trainable.contains(&p.name) {
            let v = g.leaf(p.value.clone());
            self.leaves.push((p.name.clone(), v));
            v
        } else {
            g.constant(p.value.clone())
        };
        self.bound.insert(p.name.clone(), v);
        v
    }

    /// Gradients of all bound trainable parameters, keyed by name.
    pub fn gradients(&self, grads: &Gradients) -> ParamGrads {
        let mut out = ParamGrads::default();
        for (name, v) in &self.leaves {
            if let Some(t) = grads.get(*v) {
                out.accumulate(name, t);
            }
        }
        out
    }
}

/// Named gradient accumulator. Iteration order is the name order, so sums
/// over a batch are deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    grads: BTreeMap<String, Tensor>,
}

impl ParamGrads {
    pub fn accumulate(&mut self, name: &str, g: &Tensor) {
        match self.grads.get_mut(name) {
            Some(t) => t.add_assign(g),
            None => {
                self.grads.insert(name.to_string(), g.clone());
            }
        }
    }

    pub fn merge(&mut self, other: &ParamGrads) {
        for (name, g) in &other.grads {
            self.accumulate(name, g);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            g.scale_assign(s);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Affine map `x W + b` with `W: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    /// Gaussian weights with std `scale / sqrt(in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let std = scale / (input as f64).sqrt();
        Linear {
            weight: Param::new(format!("{name}.weight"), Tensor::randn(input, output, std, rng)),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(1, output))),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Var {
        let w = b.bind(g, &self.weight);
        let y = g.matmul(x, w);
        match &self.bias {
            Some(bias) => {
                let bv = b.bind(g, bias);
                g.add_row(y, bv)
            }
            None => y,
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(1, dim, 1.0)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Var {
        let gamma = b.bind(g, &self.gamma);
        let beta = b.bind(g, &self.beta);
        g.layer_norm(x, gamma, beta)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub heads: usize,
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && width % heads == 0, "width must divide into heads");
        // residual branches are down-scaled with depth
        let residual_scale = 1.0 / (2.0 * depth as f64).sqrt();
        TransformerBlock {
            heads,
            ln1: LayerNorm::new(&format!("{name}.ln1"), width),
            qkv: Linear::new(&format!("{name}.attn.qkv"), width, 3 * width, true, 1.0, rng),
            out: Linear::new(&format!("{name}.attn.out"), width, width, true, residual_scale, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), width),
            fc1: Linear::new(&format!("{name}.mlp.fc1"), width, mlp_ratio * width, true, 1.0, rng),
            fc2: Linear::new(
                &format!("{name}.mlp.fc2"),
                mlp_ratio * width,
                width,
                true,
                residual_scale,
                rng,
            ),
        }
    }

    pub fn width(&self) -> usize {
        self.qkv.input_dim()
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var, causal: bool) -> Var {
        let width = self.width();
        let head_dim = width / self.heads;
        let h = self.ln1.forward(g, b, x);
        let qkv = self.qkv.forward(g, b, h);
        let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let q = g.slice_cols(qkv, i * head_dim, head_dim);
            let k = g.slice_cols(qkv, width + i * head_dim, head_dim);
            let v = g.slice_cols(qkv, 2 * width + i * head_dim, head_dim);
            let scores = g.matmul_t(q, k);
            let scores = g.scale(scores, inv_sqrt);
            let attn = g.softmax(scores, causal);
            heads.push(g.matmul(attn, v));
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        let attn_out = self.out.forward(g, b, merged);
        let x = g.add(x, attn_out);

        let h = self.ln2.forward(g, b, x);
        let h = self.fc1.forward(g, b, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, b, h);
        g.add(x, h)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.ln1.params();
        v.extend(self.qkv.params());
        v.extend(self.out.params());
        v.extend(self.ln2.params());
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.ln1.params_mut();
        v.extend(self.qkv.params_mut());
        v.extend(self.out.params_mut());
        v.extend(self.ln2.params_mut());
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }
}
