//! Reverse-mode differentiation over dense f64 tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each op records its inputs
//! and whatever it needs for the backward pass; [`Graph::backward`] walks the
//! nodes in reverse creation order. Parameters live in a [`ParamStore`] and
//! enter a graph as leaves linked back to their store index.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::AdamW;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: row {row} has every position masked")]
    AllMasked { op: &'static str, row: usize },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor, AutodiffError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(mismatch("tensor", format!("shape {shape:?} vs {} values", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all but the last dimension.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() { 1 } else { self.shape[..self.shape.len() - 1].iter().product() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: &str, value: Tensor) -> usize {
        assert!(self.index_of(name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name: name.to_string(), value });
        self.params.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn n_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Rounds every value through f32.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for v in &mut p.value.data {
                *v = f64::from(*v as f32);
            }
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Sum { x: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, keep: Vec<f64> },
    Concat { parts: Vec<Var> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64>, s: usize, t: usize },
    Pool { x: Var, w: Var, probs: Vec<f64> },
    Bce { z: Var, targets: Vec<f64>, pos_weight: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<usize>,
    needs_grad: bool,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Linear { x, w, b } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            Op::Add { a, b } => vec![*a, *b],
            Op::Scale { x, .. } | Op::Sum { x } | Op::Gelu { x } | Op::Dropout { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts } => parts.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Pool { x, w, .. } => vec![*x, *w],
            Op::Bce { z, .. } => vec![*z],
        }
    }
}

pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Softmax over the `true` entries of `mask`; masked entries get 0.
fn masked_softmax(scores: &[f64], mask: impl Fn(usize) -> bool) -> Vec<f64> {
    let max = (0..scores.len()).filter(|&i| mask(i)).map(|i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = (0..scores.len()).map(|i| if mask(i) { (scores[i] - max).exp() } else { 0.0 }).collect();
    let z: f64 = p.iter().sum();
    for v in &mut p {
        *v /= z;
    }
    p
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var, AutodiffError> {
        if value.data.iter().any(|x| !x.is_finite()) {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, param: None, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, param: None, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, index: usize) -> Var {
        self.nodes.push(Node { value: store.params[index].value.clone(), op: Op::Leaf, param: Some(index), needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn param_named(&mut self, store: &ParamStore, name: &str) -> Var {
        let i = store.index_of(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(store, i)
    }

    /// `y = x W + b` over the last dimension of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let (xt, wt) = (self.value(x), self.value(w));
        if wt.shape.len() != 2 || xt.cols() != wt.shape[0] {
            return Err(mismatch("linear", format!("x {:?} vs W {:?}", xt.shape, wt.shape)));
        }
        let (rows, din, dout) = (xt.rows(), wt.shape[0], wt.shape[1]);
        if let Some(b) = b {
            if self.value(b).shape != [dout] {
                return Err(mismatch("linear", format!("bias {:?} vs out {dout}", self.value(b).shape)));
            }
        }
        let mut y = vec![0.0; rows * dout];
        for r in 0..rows {
            let xr = &xt.data[r * din..(r + 1) * din];
            let yr = &mut y[r * dout..(r + 1) * dout];
            if let Some(b) = b {
                yr.copy_from_slice(&self.nodes[b.0].value.data);
            }
            for (&xv, wrow) in xr.iter().zip(wt.data.chunks_exact(dout)) {
                if xv != 0.0 {
                    for (yv, &w) in yr.iter_mut().zip(wrow) {
                        *yv += xv * w;
                    }
                }
            }
        }
        let mut shape = xt.shape.clone();
        *shape.last_mut().unwrap() = dout;
        self.push("linear", Tensor { shape, data: y }, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape != bt.shape {
            return Err(mismatch("add", format!("{:?} vs {:?}", at.shape, bt.shape)));
        }
        let data = at.data.iter().zip(&bt.data).map(|(x, y)| x + y).collect();
        let shape = at.shape.clone();
        self.push("add", Tensor { shape, data }, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|v| v * c).collect() };
        self.push("scale", out, Op::Scale { x, c })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.value(x).data.iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let data = t
            .data
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let shape = t.shape.clone();
        self.push("gelu", Tensor { shape, data }, Op::Gelu { x })
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let d = t.cols();
        if self.value(gamma).shape != [d] || self.value(beta).shape != [d] {
            return Err(mismatch("layer_norm", format!("feature size {d}")));
        }
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let rows = t.rows();
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; t.len()];
        for r in 0..rows {
            let xr = &t.data[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for i in 0..d {
                let h = (xr[i] - mean) * is;
                xhat[r * d + i] = h;
                y[r * d + i] = h * g[i] + b[i];
            }
        }
        let shape = t.shape.clone();
        self.push("layer_norm", Tensor { shape, data: y }, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Inverted dropout: zeroes each value with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`. Identity when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var, AutodiffError> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let t = self.value(x);
        let keep: Vec<f64> =
            (0..t.len()).map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 / (1.0 - rate) }).collect();
        let data = t.data.iter().zip(&keep).map(|(v, k)| v * k).collect();
        let shape = t.shape.clone();
        self.push("dropout", Tensor { shape, data }, Op::Dropout { x, keep })
    }

    /// Concatenation along the last dimension; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let lead = self.value(parts[0]).shape[..self.value(parts[0]).shape.len() - 1].to_vec();
        for &p in parts {
            let s = &self.value(p).shape;
            if s[..s.len() - 1] != lead[..] {
                return Err(mismatch("concat", format!("{s:?} vs leading {lead:?}")));
            }
        }
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                data.extend_from_slice(&t.data[r * t.cols()..(r + 1) * t.cols()]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push("concat", Tensor { shape, data }, Op::Concat { parts: parts.to_vec() })
    }

    /// Multi-head scaled dot-product attention core.
    ///
    /// `q: [B, S, D]`, `k, v: [B, T, D]`, `key_mask: [B * T]`. Heads split
    /// `D` into contiguous blocks of `D / heads`; scores are scaled by
    /// `1 / sqrt(D / heads)` and masked keys are excluded from the softmax.
    /// Returns `[B, S, D]`; weights `[B, heads, S, T]` via [`Graph::attention_weights`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, key_mask: &[bool], heads: usize) -> Result<Var, AutodiffError> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        if qt.shape.len() != 3 || kt.shape.len() != 3 || kt.shape != vt.shape {
            return Err(mismatch("attention", format!("q {:?} k {:?} v {:?}", qt.shape, kt.shape, vt.shape)));
        }
        let (b, s, d) = (qt.shape[0], qt.shape[1], qt.shape[2]);
        let t = kt.shape[1];
        if kt.shape[0] != b || kt.shape[2] != d || key_mask.len() != b * t || heads == 0 || d % heads != 0 {
            return Err(mismatch("attention", format!("q {:?} k {:?} mask {} heads {heads}", qt.shape, kt.shape, key_mask.len())));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; b * heads * s * t];
        let mut out = vec![0.0; b * s * d];
        for bi in 0..b {
            let km = &key_mask[bi * t..(bi + 1) * t];
            if s > 0 && !km.iter().any(|&m| m) {
                return Err(AutodiffError::AllMasked { op: "attention", row: bi });
            }
            for h in 0..heads {
                for si in 0..s {
                    let qrow = &qt.data[(bi * s + si) * d + h * dh..][..dh];
                    let scores: Vec<f64> = (0..t)
                        .map(|ti| {
                            let krow = &kt.data[(bi * t + ti) * d + h * dh..][..dh];
                            qrow.iter().zip(krow).map(|(a, c)| a * c).sum::<f64>() * scale
                        })
                        .collect();
                    let p = masked_softmax(&scores, |i| km[i]);
                    let orow = &mut out[(bi * s + si) * d + h * dh..][..dh];
                    for (ti, &pv) in p.iter().enumerate() {
                        if pv != 0.0 {
                            let vrow = &vt.data[(bi * t + ti) * d + h * dh..][..dh];
                            for (o, vv) in orow.iter_mut().zip(vrow) {
                                *o += pv * vv;
                            }
                        }
                    }
                    probs[((bi * heads + h) * s + si) * t..][..t].copy_from_slice(&p);
                }
            }
        }
        self.push("attention", Tensor { shape: vec![b, s, d], data: out }, Op::Attention { q, k, v, heads, probs, s, t })
    }

    /// Attention weights `[B, heads, S, T]` recorded by an attention node.
    pub fn attention_weights(&self, node: Var) -> Option<Tensor> {
        match &self.nodes[node.0].op {
            Op::Attention { heads, probs, s, t, .. } => {
                let b = self.value(node).shape[0];
                Some(Tensor { shape: vec![b, *heads, *s, *t], data: probs.clone() })
            }
            _ => None,
        }
    }

    /// Learned weighted sum over the sequence: `softmax_S(x w)` then `sum p x`.
    /// `x: [B, S, D]`, `w: [D]`, `seq_mask: [B * S]`. A row without any present
    /// position is an error unless `allow_empty`, in which case it pools to zeros.
    pub fn attention_pool(&mut self, x: Var, w: Var, seq_mask: &[bool], allow_empty: bool) -> Result<Var, AutodiffError> {
        let (xt, wt) = (self.value(x), self.value(w));
        if xt.shape.len() != 3 || wt.shape != [xt.shape[2]] || seq_mask.len() != xt.shape[0] * xt.shape[1] {
            return Err(mismatch("attention_pool", format!("x {:?} w {:?} mask {}", xt.shape, wt.shape, seq_mask.len())));
        }
        let (b, s, d) = (xt.shape[0], xt.shape[1], xt.shape[2]);
        let mut probs = vec![0.0; b * s];
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let m = &seq_mask[bi * s..(bi + 1) * s];
            if !m.iter().any(|&v| v) {
                if allow_empty {
                    continue;
                }
                return Err(AutodiffError::AllMasked { op: "attention_pool", row: bi });
            }
            let scores: Vec<f64> = (0..s)
                .map(|si| xt.data[(bi * s + si) * d..][..d].iter().zip(&wt.data).map(|(a, c)| a * c).sum())
                .collect();
            let p = masked_softmax(&scores, |i| m[i]);
            for (si, &pv) in p.iter().enumerate() {
                let xr = &xt.data[(bi * s + si) * d..][..d];
                for (o, xv) in out[bi * d..(bi + 1) * d].iter_mut().zip(xr) {
                    *o += pv * xv;
                }
            }
            probs[bi * s..(bi + 1) * s].copy_from_slice(&p);
        }
        self.push("attention_pool", Tensor { shape: vec![b, d], data: out }, Op::Pool { x, w, probs })
    }

    /// Pooling weights `[B, S]` recorded by an attention-pool node.
    pub fn pool_weights(&self, node: Var) -> Option<&[f64]> {
        match &self.nodes[node.0].op {
            Op::Pool { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean over elements of `-[pw_k y log s(z) + (1 - y) log(1 - s(z))]`,
    /// evaluated as `pw_k y softplus(-z) + (1 - y) softplus(z)`.
    /// `z, targets: [B, K]`, `pos_weight: [K]`.
    pub fn weighted_bce(&mut self, z: Var, targets: &[f64], pos_weight: &[f64]) -> Result<Var, AutodiffError> {
        let zt = self.value(z);
        let k = zt.cols();
        if targets.len() != zt.len() || pos_weight.len() != k {
            return Err(mismatch("weighted_bce", format!("logits {:?}, {} targets, {} weights", zt.shape, targets.len(), pos_weight.len())));
        }
        let n = zt.len().max(1) as f64;
        let loss = zt
            .data
            .iter()
            .zip(targets)
            .enumerate()
            .map(|(i, (&zv, &y))| pos_weight[i % k] * y * softplus(-zv) + (1.0 - y) * softplus(zv))
            .sum::<f64>()
            / n;
        self.push(
            "weighted_bce",
            Tensor::scalar(loss),
            Op::Bce { z, targets: targets.to_vec(), pos_weight: pos_weight.to_vec() },
        )
    }

    /// Gradients of the scalar `loss` with respect to every node (`None` where
    /// no gradient reaches).
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(vec![1.0; self.value(loss).len()]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                g[idx] = Some(dy);
                continue;
            }
            self.backprop(node, &dy, &mut g);
            g[idx] = Some(dy);
        }
        Gradients { grads: g, params: self.nodes.iter().map(|n| n.param).collect() }
    }

    fn backprop(&self, node: &Node, dy: &[f64], g: &mut [Option<Vec<f64>>]) {
        macro_rules! grad {
            ($v:expr) => {
                slot(g, $v, self.value($v).len())
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (rows, din, dout) = (xt.rows(), wt.shape[0], wt.shape[1]);
                if self.nodes[x.0].needs_grad {
                    let mut w_t = vec![0.0; din * dout];
                    for i in 0..din {
                        for o in 0..dout {
                            w_t[o * din + i] = wt.data[i * dout + o];
                        }
                    }
                    let gx = grad!(*x);
                    for (gxr, dyr) in gx.chunks_exact_mut(din).zip(dy.chunks_exact(dout)) {
                        for (&d, wcol) in dyr.iter().zip(w_t.chunks_exact(din)) {
                            if d != 0.0 {
                                for (g, &w) in gxr.iter_mut().zip(wcol) {
                                    *g += d * w;
                                }
                            }
                        }
                    }
                }
                {
                    let gw = grad!(*w);
                    for (xr, dyr) in xt.data.chunks_exact(din).zip(dy.chunks_exact(dout)) {
                        for (&xv, gwrow) in xr.iter().zip(gw.chunks_exact_mut(dout)) {
                            if xv != 0.0 {
                                for (g, &d) in gwrow.iter_mut().zip(dyr) {
                                    *g += xv * d;
                                }
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    let gb = grad!(*b);
                    for r in 0..rows {
                        for o in 0..dout {
                            gb[o] += dy[r * dout + o];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    let gv = grad!(v);
                    for (gi, d) in gv.iter_mut().zip(dy) {
                        *gi += d;
                    }
                }
            }
            Op::Scale { x, c } => {
                let gx = grad!(*x);
                for (gi, d) in gx.iter_mut().zip(dy) {
                    *gi += c * d;
                }
            }
            Op::Sum { x } => {
                let gx = grad!(*x);
                for gi in gx.iter_mut() {
                    *gi += dy[0];
                }
            }
            Op::Gelu { x } => {
                let xt = &self.value(*x).data;
                let gx = grad!(*x);
                for ((gi, &v), d) in gx.iter_mut().zip(xt).zip(dy) {
                    let u = GELU_C * (v + GELU_A * v * v * v);
                    let th = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *gi += d * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.value(*x).cols();
                let rows = inv_std.len();
                let gam = &self.value(*gamma).data;
                {
                    let gx = grad!(*x);
                    for r in 0..rows {
                        let dxhat: Vec<f64> = (0..d).map(|i| dy[r * d + i] * gam[i]).collect();
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(&xhat[r * d..(r + 1) * d]).map(|(a, h)| a * h).sum::<f64>() / d as f64;
                        for i in 0..d {
                            gx[r * d + i] += inv_std[r] * (dxhat[i] - m1 - xhat[r * d + i] * m2);
                        }
                    }
                }
                {
                    let gg = grad!(*gamma);
                    for r in 0..rows {
                        for i in 0..d {
                            gg[i] += dy[r * d + i] * xhat[r * d + i];
                        }
                    }
                }
                let gb = grad!(*beta);
                for r in 0..rows {
                    for i in 0..d {
                        gb[i] += dy[r * d + i];
                    }
                }
            }
            Op::Dropout { x, keep } => {
                let gx = grad!(*x);
                for ((gi, k), d) in gx.iter_mut().zip(keep).zip(dy) {
                    *gi += k * d;
                }
            }
            Op::Concat { parts } => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let gp = grad!(p);
                    for r in 0..rows {
                        for j in 0..c {
                            gp[r * c + j] += dy[r * total + offset + j];
                        }
                    }
                    offset += c;
                }
            }
            Op::Attention { q, k, v, heads, probs, s, t } => {
                let (qt, kt, vt) = (self.value(*q), self.value(*k), self.value(*v));
                let (b, d) = (qt.shape[0], qt.shape[2]);
                let (s, t, heads) = (*s, *t, *heads);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = vec![0.0; qt.len()];
                let mut gk = vec![0.0; kt.len()];
                let mut gv = vec![0.0; vt.len()];
                for bi in 0..b {
                    for h in 0..heads {
                        for si in 0..s {
                            let p = &probs[((bi * heads + h) * s + si) * t..][..t];
                            let dout = &dy[(bi * s + si) * d + h * dh..][..dh];
                            let dp: Vec<f64> = (0..t)
                                .map(|ti| vt.data[(bi * t + ti) * d + h * dh..][..dh].iter().zip(dout).map(|(a, c)| a * c).sum())
                                .collect();
                            let dot: f64 = p.iter().zip(&dp).map(|(a, c)| a * c).sum();
                            for ti in 0..t {
                                if p[ti] == 0.0 {
                                    continue;
                                }
                                let ds = p[ti] * (dp[ti] - dot) * scale;
                                let kb = (bi * t + ti) * d + h * dh;
                                let qb = (bi * s + si) * d + h * dh;
                                for j in 0..dh {
                                    gv[kb + j] += p[ti] * dout[j];
                                    gq[qb + j] += ds * kt.data[kb + j];
                                    gk[kb + j] += ds * qt.data[qb + j];
                                }
                            }
                        }
                    }
                }
                for (var, local) in [(*q, gq), (*k, gk), (*v, gv)] {
                    let gvar = grad!(var);
                    for (a, c) in gvar.iter_mut().zip(local) {
                        *a += c;
                    }
                }
            }
            Op::Pool { x, w, probs } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (b, s, d) = (xt.shape[0], xt.shape[1], xt.shape[2]);
                let mut gx = vec![0.0; xt.len()];
                let mut gw = vec![0.0; d];
                for bi in 0..b {
                    let p = &probs[bi * s..(bi + 1) * s];
                    let dout = &dy[bi * d..(bi + 1) * d];
                    let dp: Vec<f64> =
                        (0..s).map(|si| xt.data[(bi * s + si) * d..][..d].iter().zip(dout).map(|(a, c)| a * c).sum()).collect();
                    let dot: f64 = p.iter().zip(&dp).map(|(a, c)| a * c).sum();
                    for si in 0..s {
                        if p[si] == 0.0 {
                            continue;
                        }
                        let ds = p[si] * (dp[si] - dot);
                        let base = (bi * s + si) * d;
                        for j in 0..d {
                            gx[base + j] += p[si] * dout[j] + ds * wt.data[j];
                            gw[j] += ds * xt.data[base + j];
                        }
                    }
                }
                for (var, local) in [(*x, gx), (*w, gw)] {
                    let gvar = grad!(var);
                    for (a, c) in gvar.iter_mut().zip(local) {
                        *a += c;
                    }
                }
            }
            Op::Bce { z, targets, pos_weight } => {
                let zt = &self.value(*z).data;
                let k = pos_weight.len();
                let n = zt.len().max(1) as f64;
                let gz = grad!(*z);
                for (i, (gi, (&zv, &y))) in gz.iter_mut().zip(zt.iter().zip(targets)).enumerate() {
                    let dl = -pos_weight[i % k] * y * sigmoid(-zv) + (1.0 - y) * sigmoid(zv);
                    *gi += dy[0] * dl / n;
                }
            }
        }
    }
}

fn slot(g: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    g[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<Option<usize>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient per store parameter, summed over every leaf that references it.
    pub fn for_params(&self, n_params: usize) -> Vec<Option<Vec<f64>>> {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; n_params];
        for (g, p) in self.grads.iter().zip(&self.params) {
            if let (Some(g), Some(p)) = (g, p) {
                match &mut out[*p] {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_bias_grad() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let mut store = ParamStore::default();
        store.add("w", t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        store.add("b", Tensor::zeros(&[2]));
        let w = g.param(&store, 0);
        let b = g.param(&store, 1);
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let s = g.sum(y).unwrap();
        let grads = g.backward(s);
        assert_eq!(grads.of(b).unwrap(), &[6.0, 6.0]);
    }

    #[test]
    fn bce_reference_values() {
        let mut g = Graph::new();
        let z = g.constant(t(&[1, 1], &[0.0]));
        let l = g.weighted_bce(z, &[1.0], &[1.0]).unwrap();
        assert!((g.value(l).data[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let z = g.constant(t(&[1, 1], &[100.0]));
        let l = g.weighted_bce(z, &[0.0], &[1.0]).unwrap();
        assert!((g.value(l).data[0] - 100.0).abs() < 1e-6);
        let z = g.constant(t(&[2, 1], &[40.0, -40.0]));
        let l = g.weighted_bce(z, &[1.0, 0.0], &[1.0]).unwrap();
        assert!(g.value(l).data[0] < 1e-15);
    }

    #[test]
    fn single_key_attention_is_all_ones() {
        let mut g = Graph::new();
        let q = g.constant(t(&[1, 2, 4], &[0.3, -1.0, 2.0, 0.5, 1.0, 1.0, -2.0, 0.1]));
        let k = g.constant(t(&[1, 1, 4], &[0.2, 0.1, -0.3, 0.7]));
        let v = g.constant(t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let a = g.attention(q, k, v, &[true], 2).unwrap();
        assert!(g.attention_weights(a).unwrap().data.iter().all(|&w| w == 1.0));
        assert_eq!(g.value(a).data, vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn uniform_keys_make_output_independent_of_queries() {
        let mut g = Graph::new();
        let k = g.constant(t(&[1, 3, 2], &[0.5, 0.5, 0.5, 0.5, 0.5, 0.5]));
        let v = g.constant(t(&[1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let q1 = g.constant(t(&[1, 1, 2], &[3.0, -1.0]));
        let q2 = g.constant(t(&[1, 1, 2], &[-7.0, 0.2]));
        let a1 = g.attention(q1, k, v, &[true; 3], 1).unwrap();
        let a2 = g.attention(q2, k, v, &[true; 3], 1).unwrap();
        assert_eq!(g.value(a1), g.value(a2));
        assert!((g.value(a1).data[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn masking_and_all_masked() {
        let mut g = Graph::new();
        let q = g.constant(t(&[1, 1, 2], &[1.0, 0.0]));
        let k = g.constant(t(&[1, 2, 2], &[1.0, 0.0, 5.0, 0.0]));
        let v = g.constant(t(&[1, 2, 2], &[1.0, 1.0, 9.0, 9.0]));
        let a = g.attention(q, k, v, &[true, false], 1).unwrap();
        assert_eq!(g.value(a).data, vec![1.0, 1.0]);
        assert_eq!(g.attention(q, k, v, &[false, false], 1), Err(AutodiffError::AllMasked { op: "attention", row: 0 }));
    }

    #[test]
    fn pool_symmetry_and_empty_rows() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 4.0, 4.0, 4.0, 0.0, 0.0, 0.0]));
        let w = g.constant(t(&[3], &[0.3, -0.2, 0.9]));
        let p = g.attention_pool(x, w, &[true, true, false, false], true).unwrap();
        assert_eq!(g.value(p).data, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        assert_eq!(&g.pool_weights(p).unwrap()[..2], &[0.5, 0.5]);
        assert!(matches!(g.attention_pool(x, w, &[true, true, false, false], false), Err(AutodiffError::AllMasked { row: 1, .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = masked_softmax(&[1000.0, -3.0, 2.5, 0.1], |_| true);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let perm = masked_softmax(&[2.5, 0.1, 1000.0, -3.0], |_| true);
        assert_eq!(perm, vec![p[2], p[3], p[0], p[1]]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[f64::MAX]));
        assert_eq!(g.scale(x, 10.0), Err(AutodiffError::NonFinite { op: "scale" }));
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let w = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(g.linear(x, w, None), Err(AutodiffError::ShapeMismatch { .. })));
    }
}
