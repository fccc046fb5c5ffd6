//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the backward pass is a single reverse sweep. Loss
//! functions live outside the tape: they hand back their value together with
//! the gradient for each input and enter the graph through [`Graph::loss`].

use std::collections::HashMap;

use super::attention::{self, AttentionShape};
use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

const LN_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)
const GELU_A: f32 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(f32, f32)>,
    },
    Gelu(Var),
    Attention {
        qkv: Var,
        shape: AttentionShape,
        probs: Vec<f32>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Var, Var),
    SegmentMean {
        x: Var,
        seg: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f32>,
    },
    Loss(Vec<(Var, Tensor)>),
    WeightedSum(Vec<(Var, f32)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf that receives a gradient, for checking ops in isolation.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Parameter leaf; repeated calls for one id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(
            store.value(id).clone(),
            Op::Param,
            store.is_trainable(id),
        );
        self.params.insert(id, v);
        v
    }

    /// `x (n x in) * w (in x out) + b (1 x out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(
            xv.cols(),
            wv.rows(),
            "linear: input has {} columns, weight expects {}",
            xv.cols(),
            wv.rows()
        );
        let mut out = xv.matmul(wv);
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.shape(), (1, out.cols()));
            let bias = bias.data().to_vec();
            for r in 0..out.rows() {
                for (o, bv) in out.row_mut(r).iter_mut().zip(&bias) {
                    *o += bv;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` (`1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = Tensor::zeros(rows, cols);
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (row[c] - mean) * rstd * g[c] + bt[c];
            }
            stats.push((mean, rstd));
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            ng,
        )
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let out = Tensor::from_vec(xv.rows(), xv.cols(), data);
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Multi-head self-attention over packed `[q | k | v]` rows.
    pub fn attention(&mut self, qkv: Var, batch: usize, heads: usize, causal: bool) -> Var {
        let qv = self.value(qkv);
        assert_eq!(qv.cols() % 3, 0);
        let dim = qv.cols() / 3;
        assert_eq!(dim % heads, 0, "dim {dim} not divisible by {heads} heads");
        assert_eq!(qv.rows() % batch, 0);
        let shape = AttentionShape {
            batch,
            seq: qv.rows() / batch,
            dim,
            heads,
            causal,
        };
        let (out, probs) = attention::forward(qv.data(), shape);
        let out = Tensor::from_vec(qv.rows(), dim, out);
        let ng = self.ng(qkv);
        self.push(out, Op::Attention { qkv, shape, probs }, ng)
    }

    /// `out[i] = x[idx[i]]`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(idx.len(), xv.cols());
        for (i, &src) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(src));
        }
        let ng = self.ng(x);
        self.push(out, Op::GatherRows { x, idx }, ng)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let out = Tensor::from_vec(av.rows() + bv.rows(), av.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::ConcatRows(a, b), ng)
    }

    /// Mean over consecutive groups of `seg` rows.
    pub fn segment_mean(&mut self, x: Var, seg: usize) -> Var {
        let xv = self.value(x);
        assert!(seg > 0 && xv.rows() % seg == 0);
        let groups = xv.rows() / seg;
        let mut out = Tensor::zeros(groups, xv.cols());
        let inv = 1.0 / seg as f32;
        for g in 0..groups {
            for r in 0..seg {
                let src = xv.row(g * seg + r);
                for (o, s) in out.row_mut(g).iter_mut().zip(src) {
                    *o += s * inv;
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::SegmentMean { x, seg }, ng)
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let norm = xv
                .row(r)
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt()
                .max(1e-12) as f32;
            for v in out.row_mut(r) {
                *v /= norm;
            }
            norms.push(norm);
        }
        let ng = self.ng(x);
        self.push(out, Op::L2Normalize { x, norms }, ng)
    }

    /// Scalar loss computed outside the tape. `inputs` pairs each input with
    /// the gradient of `value` with respect to it.
    pub fn loss(&mut self, value: f32, inputs: Vec<(Var, Tensor)>) -> Var {
        for (v, g) in &inputs {
            assert_eq!(self.value(*v).shape(), g.shape(), "loss gradient shape");
        }
        let ng = inputs.iter().any(|(v, _)| self.ng(*v));
        self.push(Tensor::scalar(value), Op::Loss(inputs), ng)
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, f32)>) -> Var {
        let total: f32 = terms.iter().map(|&(v, w)| w * self.value(v).item()).sum();
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(Tensor::scalar(total), Op::WeightedSum(terms), ng)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { by_node: grads }
    }

    /// Backward pass that adds parameter gradients into `store`.
    pub fn backward_into(&self, root: Var, store: &mut ParamStore) -> Grads {
        let grads = self.backward(root);
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.accumulate_grad(id, g);
            }
        }
        grads
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &self.nodes[i].op {
            Op::Input | Op::Param => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, din, dout) = (xv.rows(), xv.cols(), wv.cols());
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(n, din);
                    gemm(n, dout, din, g.data(), false, wv.data(), true, dx.data_mut(), 0.0);
                    acc(grads, *x, dx);
                }
                if self.ng(*w) {
                    let mut dw = Tensor::zeros(din, dout);
                    gemm(din, n, dout, xv.data(), true, g.data(), false, dw.data_mut(), 0.0);
                    acc(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| self.ng(*b)) {
                    let mut db = Tensor::zeros(1, dout);
                    for r in 0..n {
                        for (d, gv) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                    acc(grads, b, db);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let xv = self.value(*x);
                let (rows, cols) = xv.shape();
                let gm = self.value(*gamma).data();
                let mut dx = Tensor::zeros(rows, cols);
                let mut dg = Tensor::zeros(1, cols);
                let mut db = Tensor::zeros(1, cols);
                let mut xhat = vec![0.0f32; cols];
                let mut dxhat = vec![0.0f32; cols];
                for r in 0..rows {
                    let (mean, rstd) = stats[r];
                    let gr = g.row(r);
                    for c in 0..cols {
                        xhat[c] = (xv.row(r)[c] - mean) * rstd;
                        dxhat[c] = gr[c] * gm[c];
                    }
                    for c in 0..cols {
                        dg.data_mut()[c] += gr[c] * xhat[c];
                        db.data_mut()[c] += gr[c];
                    }
                    let m1 = dxhat.iter().sum::<f32>() / cols as f32;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f32>() / cols as f32;
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = rstd * (dxhat[c] - m1 - xhat[c] * m2);
                    }
                }
                if self.ng(*x) {
                    acc(grads, *x, dx);
                }
                if self.ng(*gamma) {
                    acc(grads, *gamma, dg);
                }
                if self.ng(*beta) {
                    acc(grads, *beta, db);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gv * (0.5 * (1.0 + t) + 0.5 * v * dt)
                    })
                    .collect();
                acc(grads, *x, Tensor::from_vec(xv.rows(), xv.cols(), data));
            }
            Op::Attention { qkv, shape, probs } => {
                let qv = self.value(*qkv);
                let d = attention::backward(qv.data(), probs, g.data(), *shape);
                acc(grads, *qkv, Tensor::from_vec(qv.rows(), qv.cols(), d));
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for (i, &src) in idx.iter().enumerate() {
                    for (d, gv) in dx.row_mut(src).iter_mut().zip(g.row(i)) {
                        *d += gv;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).len();
                let (ra, cols) = self.value(*a).shape();
                if self.ng(*a) {
                    acc(grads, *a, Tensor::from_vec(ra, cols, g.data()[..na].to_vec()));
                }
                if self.ng(*b) {
                    let rb = self.value(*b).rows();
                    acc(grads, *b, Tensor::from_vec(rb, cols, g.data()[na..].to_vec()));
                }
            }
            Op::SegmentMean { x, seg } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                let inv = 1.0 / *seg as f32;
                for r in 0..xv.rows() {
                    let src = g.row(r / seg);
                    for (d, gv) in dx.row_mut(r).iter_mut().zip(src) {
                        *d = gv * inv;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::L2Normalize { x, norms } => {
                let y = &self.nodes[i].value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Loss(inputs) => {
                let up = g.item();
                for (v, local) in inputs {
                    if self.ng(*v) {
                        let mut t = local.clone();
                        t.scale(up);
                        acc(grads, *v, t);
                    }
                }
            }
            Op::WeightedSum(terms) => {
                let up = g.item();
                for &(v, w) in terms {
                    if self.ng(v) {
                        acc(grads, v, Tensor::scalar(up * w));
                    }
                }
            }
        }
    }
}
