//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records operations eagerly: every op computes its value when
//! it is added, so the forward pass is just building the graph. Calling
//! [`Graph::backward`] (or [`Graph::backward_with`] for vector-valued
//! outputs with an upstream gradient) walks the tape in reverse.
//!
//! Only nodes downstream of a [`Graph::leaf`] carry gradients; anything built
//! purely from [`Graph::constant`]s is skipped during the backward sweep.
//!
//! Shape errors inside the graph are programming errors and panic. Public
//! model entry points validate user-supplied shapes before building graphs.

use crate::tensor::{gemm, Dims, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    NormalizeRows { a: Var, norms: Vec<f64> },
    Pick { a: Var, row: usize, col: usize },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by a backward sweep, indexed by leaf [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, b, false, false)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, b, false, true)
    }

    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimensions: {ar}x{ac} (t={ta}) * {br}x{bc} (t={tb})");
        let mut out = Tensor::zeros(m, n);
        gemm(
            self.value(a).as_slice(),
            self.value(b).as_slice(),
            out.as_mut_slice(),
            Dims { m, k, n },
            ta,
            tb,
            false,
        );
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self
            .value(a)
            .reshape(rows, cols)
            .expect("reshape preserves element count");
        let rg = self.rg(&[a]);
        self.push(out, Op::Reshape(a), rg)
    }

    // ----- elementwise ----------------------------------------------------

    fn assert_same(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same(a, b, "add");
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same(a, b, "sub");
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same(a, b, "mul");
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row: row shape");
        let mut out = self.value(a).clone();
        let rv = self.value(row).as_slice().to_vec();
        for i in 0..r {
            for (o, b) in out.row_mut(i).iter_mut().zip(&rv) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row: row shape");
        let mut out = self.value(a).clone();
        let rv = self.value(row).as_slice().to_vec();
        for i in 0..r {
            for (o, b) in out.row_mut(i).iter_mut().zip(&rv) {
                *o *= b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(out, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Multiplies `a` by the `1 x 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "scale_by: scalar operand");
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x * sv);
        let rg = self.rg(&[a, s]);
        self.push(out, Op::ScaleBy(a, s), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(out, Op::Log(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            let u = GELU_C * (x + GELU_A * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    // ----- normalization --------------------------------------------------

    /// Row-wise layer normalization with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c), "layer_norm: gamma shape");
        assert_eq!(self.shape(beta), (1, c), "layer_norm: beta shape");
        let xv = self.value(x);
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        let mut xhat = Tensor::zeros(r, c);
        let mut out = Tensor::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(i);
            for j in 0..c {
                xh[j] = (row[j] - mean) * is;
            }
            let o = out.row_mut(i);
            for j in 0..c {
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked
    /// to zero probability.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let limit = if causal { (i + 1).min(c) } else { c };
            let row = &av.row(i)[..limit];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = out.row_mut(i);
            let mut s = 0.0;
            for j in 0..limit {
                o[j] = (row[j] - m).exp();
                s += o[j];
            }
            for v in &mut o[..limit] {
                *v /= s;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = av.row(i);
            let lse = log_sum_exp(row);
            for (o, v) in out.row_mut(i).iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// Each row divided by its L2 norm. Rows must be nonzero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let (r, _) = self.shape(a);
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = out.row_mut(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::NormalizeRows { a, norms }, rg)
    }

    // ----- structure ------------------------------------------------------

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, _) = self.shape(a);
        assert!(start + len <= r, "slice_rows out of range");
        let out = self.value(a).slice_rows(start, len);
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceRows { a, start }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "slice_cols out of range");
        let av = self.value(a);
        let mut out = Tensor::zeros(r, len);
        for i in 0..r {
            out.row_mut(i)
                .copy_from_slice(&av.row(i)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceCols { a, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let blocks: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Tensor::vstack(&blocks).expect("concat_rows: column counts agree");
        let rg = self.rg(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.shape(parts[0]).0;
        let total: usize = parts
            .iter()
            .map(|p| {
                assert_eq!(self.shape(*p).0, r, "concat_cols: row counts differ");
                self.shape(*p).1
            })
            .sum();
        let mut out = Tensor::zeros(r, total);
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            let pc = pv.cols();
            for i in 0..r {
                out.row_mut(i)[off..off + pc].copy_from_slice(pv.row(i));
            }
            off += pc;
        }
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    // ----- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// The single element `(row, col)` as a `1 x 1` node.
    pub fn pick(&mut self, a: Var, row: usize, col: usize) -> Var {
        let out = Tensor::scalar(self.value(a).get(row, col));
        let rg = self.rg(&[a]);
        self.push(out, Op::Pick { a, row, col }, rg)
    }

    /// `sum(a * b)` for equally shaped operands.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    // ----- backward -------------------------------------------------------

    /// Gradients of a `1 x 1` output with respect to every leaf.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(
            self.shape(output),
            (1, 1),
            "backward() needs a scalar output; use backward_with"
        );
        self.backward_with(&[(output, Tensor::scalar(1.0))])
    }

    /// Backward sweep seeded with explicit upstream gradients.
    pub fn backward_with(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.shape(), "seed gradient shape");
            accumulate(&mut grads, *v, g.clone());
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let av = self.value(a);
                let bv = self.value(b);
                let (m, n) = g.shape();
                let k = if ta { av.rows() } else { av.cols() };
                if self.wants(a) {
                    let buf = ensure(grads, a, av.shape());
                    // C = op(A) op(B); dop(A) = G op(B)^T
                    if ta {
                        // A stored k x m; dA = op(B) G^T  (k x m)
                        gemm(
                            bv.as_slice(),
                            g.as_slice(),
                            buf.as_mut_slice(),
                            Dims { m: k, k: n, n: m },
                            tb,
                            true,
                            true,
                        );
                    } else {
                        gemm(
                            g.as_slice(),
                            bv.as_slice(),
                            buf.as_mut_slice(),
                            Dims { m, k: n, n: k },
                            false,
                            !tb,
                            true,
                        );
                    }
                }
                if self.wants(b) {
                    let buf = ensure(grads, b, bv.shape());
                    // dop(B) = op(A)^T G
                    if tb {
                        // B stored n x k; dB = G^T op(A)  (n x k)
                        gemm(
                            g.as_slice(),
                            av.as_slice(),
                            buf.as_mut_slice(),
                            Dims { m: n, k: m, n: k },
                            true,
                            ta,
                            true,
                        );
                    } else {
                        gemm(
                            av.as_slice(),
                            g.as_slice(),
                            buf.as_mut_slice(),
                            Dims { m: k, k: m, n },
                            !ta,
                            false,
                            true,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*row) {
                    accumulate(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row).as_slice();
                if self.wants(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (x, r) in ga.row_mut(i).iter_mut().zip(rv) {
                            *x *= r;
                        }
                    }
                    accumulate(grads, *a, ga);
                }
                if self.wants(*row) {
                    let av = self.value(*a);
                    let mut gr = Tensor::zeros(1, rv.len());
                    for i in 0..g.rows() {
                        let (gi, ai) = (g.row(i), av.row(i));
                        for ((o, x), y) in gr.as_mut_slice().iter_mut().zip(gi).zip(ai) {
                            *o += x * y;
                        }
                    }
                    accumulate(grads, *row, gr);
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    let s = *s;
                    accumulate(grads, *a, g.map(|x| x * s));
                }
            }
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s).item();
                if self.wants(*a) {
                    accumulate(grads, *a, g.map(|x| x * sv));
                }
                if self.wants(*s) {
                    let d: f64 = g
                        .as_slice()
                        .iter()
                        .zip(self.value(*a).as_slice())
                        .map(|(x, y)| x * y)
                        .sum();
                    accumulate(grads, *s, Tensor::scalar(d));
                }
            }
            Op::Exp(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.zip_map(&node.value, |x, y| x * y));
                }
            }
            Op::Log(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.zip_map(self.value(*a), |x, y| x / y));
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    accumulate(
                        grads,
                        *a,
                        g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
                    );
                }
            }
            Op::Sigmoid(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.zip_map(&node.value, |x, s| x * s * (1.0 - s)));
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    accumulate(
                        grads,
                        *a,
                        g.zip_map(self.value(*a), |gx, x| {
                            let u = GELU_C * (x + GELU_A * x * x * x);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                            gx * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        }),
                    );
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = g.shape();
                let gv = self.value(*gamma).as_slice();
                if self.wants(*gamma) {
                    let mut dg = Tensor::zeros(1, c);
                    for i in 0..r {
                        for ((o, a), b) in dg.as_mut_slice().iter_mut().zip(g.row(i)).zip(xhat.row(i)) {
                            *o += a * b;
                        }
                    }
                    accumulate(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, column_sums(g));
                }
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(r, c);
                    let cf = c as f64;
                    for i in 0..r {
                        let gi = g.row(i);
                        let xh = xhat.row(i);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let d = gi[j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= cf;
                        mean_dx /= cf;
                        let o = dx.row_mut(i);
                        for j in 0..c {
                            let d = gi[j] * gv[j];
                            o[j] = inv_std[i] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let y = &node.value;
                    let (r, c) = y.shape();
                    let mut dx = Tensor::zeros(r, c);
                    for i in 0..r {
                        let (yi, gi) = (y.row(i), g.row(i));
                        let s: f64 = yi.iter().zip(gi).map(|(p, q)| p * q).sum();
                        for ((o, p), q) in dx.row_mut(i).iter_mut().zip(yi).zip(gi) {
                            *o = p * (q - s);
                        }
                    }
                    accumulate(grads, *a, dx);
                }
            }
            Op::LogSoftmax(a) => {
                if self.wants(*a) {
                    let y = &node.value;
                    let (r, c) = y.shape();
                    let mut dx = Tensor::zeros(r, c);
                    for i in 0..r {
                        let (yi, gi) = (y.row(i), g.row(i));
                        let s: f64 = gi.iter().sum();
                        for ((o, ly), q) in dx.row_mut(i).iter_mut().zip(yi).zip(gi) {
                            *o = q - ly.exp() * s;
                        }
                    }
                    accumulate(grads, *a, dx);
                }
            }
            Op::SliceRows { a, start } => {
                if self.wants(*a) {
                    let buf = ensure(grads, *a, self.shape(*a));
                    let c = g.cols();
                    let dst = &mut buf.as_mut_slice()[start * c..(start + g.rows()) * c];
                    for (d, s) in dst.iter_mut().zip(g.as_slice()) {
                        *d += s;
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if self.wants(*a) {
                    let buf = ensure(grads, *a, self.shape(*a));
                    for i in 0..g.rows() {
                        let dst = &mut buf.row_mut(i)[*start..start + g.cols()];
                        for (d, s) in dst.iter_mut().zip(g.row(i)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let pr = self.shape(*p).0;
                    if self.wants(*p) {
                        accumulate(grads, *p, g.slice_rows(off, pr));
                    }
                    off += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (pr, pc) = self.shape(*p);
                    if self.wants(*p) {
                        let mut gp = Tensor::zeros(pr, pc);
                        for i in 0..pr {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + pc]);
                        }
                        accumulate(grads, *p, gp);
                    }
                    off += pc;
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.transpose());
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    let (r, c) = self.shape(*a);
                    accumulate(grads, *a, g.reshape(r, c).expect("same element count"));
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let (r, c) = self.shape(*a);
                    accumulate(grads, *a, Tensor::full(r, c, g.item()));
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let (r, c) = self.shape(*a);
                    accumulate(grads, *a, Tensor::full(r, c, g.item() / (r * c) as f64));
                }
            }
            Op::NormalizeRows { a, norms } => {
                if self.wants(*a) {
                    let y = &node.value;
                    let (r, c) = y.shape();
                    let mut dx = Tensor::zeros(r, c);
                    for i in 0..r {
                        let (yi, gi) = (y.row(i), g.row(i));
                        let s: f64 = yi.iter().zip(gi).map(|(p, q)| p * q).sum();
                        for ((o, p), q) in dx.row_mut(i).iter_mut().zip(yi).zip(gi) {
                            *o = (q - p * s) / norms[i];
                        }
                    }
                    accumulate(grads, *a, dx);
                }
            }
            Op::Pick { a, row, col } => {
                if self.wants(*a) {
                    let buf = ensure(grads, *a, self.shape(*a));
                    let c = buf.cols();
                    buf.as_mut_slice()[row * c + col] += g.item();
                }
            }
        }
    }
}

fn ensure(grads: &mut [Option<Tensor>], v: Var, shape: (usize, usize)) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, x) in out.as_mut_slice().iter_mut().zip(g.row(i)) {
            *o += x;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckReport};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(r: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(r, c, 1.0, &mut rng)
    }

    /// Builds `sum(weights * f(x))` so every output element contributes.
    fn check<F>(inputs: Vec<Tensor>, f: F) -> GradCheckReport
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        check_gradients(&inputs, 1e-6, |g, vars| {
            let out = f(g, vars);
            let (r, c) = g.value(out).shape();
            let w = Tensor::from_vec(
                r,
                c,
                (0..r * c).map(|i| 0.3 + 0.17 * (i as f64).sin()).collect(),
            )
            .unwrap();
            let w = g.constant(w);
            g.dot(out, w)
        })
    }

    #[test]
    fn matmul_variants() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { rand_t(4, 3, 1) } else { rand_t(3, 4, 1) };
            let b = if tb { rand_t(5, 4, 2) } else { rand_t(4, 5, 2) };
            let r = check(vec![a, b], |g, v| g.matmul_ex(v[0], v[1], ta, tb));
            assert!(r.max_rel_error < 1e-6, "ta={ta} tb={tb}: {r:?}");
        }
    }

    #[test]
    fn elementwise_ops() {
        let a = rand_t(3, 4, 3);
        let b = rand_t(3, 4, 4);
        let pos = a.map(|x| x.abs() + 0.5);
        assert!(check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1])).max_rel_error < 1e-6);
        assert!(check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1])).max_rel_error < 1e-6);
        assert!(check(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1])).max_rel_error < 1e-6);
        assert!(check(vec![a.clone()], |g, v| g.exp(v[0])).max_rel_error < 1e-6);
        assert!(check(vec![pos], |g, v| g.log(v[0])).max_rel_error < 1e-6);
        assert!(check(vec![a.clone()], |g, v| g.sigmoid(v[0])).max_rel_error < 1e-6);
        assert!(check(vec![a.clone()], |g, v| g.gelu(v[0])).max_rel_error < 1e-6);
        assert!(check(vec![a.clone()], |g, v| g.scale(v[0], -2.5)).max_rel_error < 1e-6);
        assert!(check(vec![a.clone()], |g, v| g.transpose(v[0])).max_rel_error < 1e-6);
        assert!(check(vec![a.clone()], |g, v| g.reshape(v[0], 6, 2)).max_rel_error < 1e-6);
        let shifted = a.map(|x| if x.abs() < 0.05 { x + 0.2 } else { x });
        assert!(check(vec![shifted], |g, v| g.relu(v[0])).max_rel_error < 1e-6);
    }

    #[test]
    fn broadcast_and_scalar_ops() {
        let a = rand_t(3, 4, 5);
        let row = rand_t(1, 4, 6);
        let s = rand_t(1, 1, 7);
        assert!(check(vec![a.clone(), row.clone()], |g, v| g.add_row(v[0], v[1])).max_rel_error < 1e-6);
        assert!(check(vec![a.clone(), row], |g, v| g.mul_row(v[0], v[1])).max_rel_error < 1e-6);
        assert!(check(vec![a, s], |g, v| g.scale_by(v[0], v[1])).max_rel_error < 1e-6);
    }

    #[test]
    fn normalization_ops() {
        let x = rand_t(4, 6, 8);
        let gamma = rand_t(1, 6, 9);
        let beta = rand_t(1, 6, 10);
        let r = check(vec![x.clone(), gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2]));
        assert!(r.max_rel_error < 1e-5, "{r:?}");
        assert!(check(vec![x.clone()], |g, v| g.softmax(v[0], false)).max_rel_error < 1e-6);
        let sq = rand_t(5, 5, 11);
        assert!(check(vec![sq], |g, v| g.softmax(v[0], true)).max_rel_error < 1e-6);
        assert!(check(vec![x.clone()], |g, v| g.log_softmax(v[0])).max_rel_error < 1e-6);
        assert!(check(vec![x], |g, v| g.normalize_rows(v[0])).max_rel_error < 1e-6);
    }

    #[test]
    fn structural_ops() {
        let a = rand_t(4, 5, 12);
        let b = rand_t(2, 5, 13);
        let c = rand_t(4, 3, 14);
        assert!(check(vec![a.clone()], |g, v| g.slice_rows(v[0], 1, 2)).max_rel_error < 1e-6);
        assert!(check(vec![a.clone()], |g, v| g.slice_cols(v[0], 2, 3)).max_rel_error < 1e-6);
        assert!(check(vec![a.clone(), b], |g, v| g.concat_rows(&[v[0], v[1], v[0]])).max_rel_error < 1e-6);
        assert!(check(vec![a.clone(), c], |g, v| g.concat_cols(&[v[1], v[0]])).max_rel_error < 1e-6);
        assert!(check(vec![a.clone()], |g, v| g.pick(v[0], 2, 3)).max_rel_error < 1e-6);
        assert!(check(vec![a.clone()], |g, v| g.mean(v[0])).max_rel_error < 1e-6);
        assert!(check(vec![a], |g, v| g.sum(v[0])).max_rel_error < 1e-6);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(3, 3));
        let y = g.softmax(x, true);
        let v = g.value(y);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row(1), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.leaf(Tensor::scalar(3.0));
        let c = g.mul(a, b);
        let grads = g.backward(c);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().item(), 2.0);
    }

    #[test]
    fn shared_leaf_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x);
        let z = g.add(y, x);
        let grads = g.backward(z);
        assert_eq!(grads.get(x).unwrap().item(), 7.0);
    }
}
