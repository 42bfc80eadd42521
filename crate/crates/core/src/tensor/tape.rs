//! Tape-based reverse-mode differentiation over [`DenseTensor`]s.
//!
//! Every primitive evaluates eagerly and, when differentiation is enabled,
//! appends a node to the tape. [`Tape::backward`] walks the nodes in strict
//! reverse recording order and accumulates gradients into the parameters
//! that were loaded with [`Tape::param`].

use std::collections::HashMap;

use rand::{Rng, RngCore};

use super::{DenseTensor, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Negative slope used by [`Tape::leaky_relu`] throughout the model.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sum(Vec<NodeId>),
    MeanOf(Vec<NodeId>),
    Scale(NodeId, f64),
    LeakyRelu(NodeId, f64),
    Relu(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    Dropout(NodeId, Vec<f64>),
    ConcatCols(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    Mix(NodeId, Vec<NodeId>),
    SumAll(NodeId),
    Mean(NodeId),
    BceWithLogits {
        logits: NodeId,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
    SquaredError {
        pred: NodeId,
        target: DenseTensor,
    },
}

struct Node {
    value: DenseTensor,
    op: Op,
}

/// Per-parameter gradients, dense over every parameter of a store.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<DenseTensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .ids()
                .map(|id| {
                    let (r, c) = store.get(id).shape();
                    DenseTensor::zeros(r, c)
                })
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &DenseTensor {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &DenseTensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    /// True when every entry of the gradient for `id` is exactly zero.
    pub fn is_zero(&self, id: ParamId) -> bool {
        self.grads[id.0].values().iter().all(|&v| v == 0.0)
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
    record: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            record: true,
            consumed: false,
        }
    }

    /// A tape that only evaluates; [`Tape::backward`] on it is an error.
    pub fn no_grad() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseTensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: DenseTensor, op: Op) -> NodeId {
        let op = if self.record { op } else { Op::Constant };
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn constant(&mut self, value: DenseTensor) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// Loads a parameter; repeated loads of the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.push(store.get(id).clone(), Op::Param(id));
        self.params.insert(id, n);
        n
    }

    /// True when `id` was loaded on this tape.
    pub fn touched(&self, id: ParamId) -> bool {
        self.params.contains_key(&id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Adds a `1×m` bias row to every row of an `n×m` input.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, m) = self.shape(a);
        let sb = self.shape(bias);
        if sb != (1, m) {
            return Err(Error::Shape {
                op: "add_bias",
                left: (n, m),
                right: sb,
            });
        }
        let mut v = self.value(a).clone();
        let b = self.value(bias).values().to_vec();
        for row in v.values_mut().chunks_mut(m.max(1)) {
            for (x, bb) in row.iter_mut().zip(&b) {
                *x += bb;
            }
        }
        Ok(self.push(v, Op::AddBias(a, bias)))
    }

    /// `x · W + b`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Elementwise sum of one or more equally shaped tensors.
    pub fn sum(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs.first().ok_or_else(|| Error::Tape("sum of nothing".into()))?;
        let mut v = self.value(first).clone();
        for &x in &xs[1..] {
            self.same_shape("sum", first, x)?;
            v.add_assign(self.value(x));
        }
        Ok(self.push(v, Op::Sum(xs.to_vec())))
    }

    /// Elementwise mean of one or more equally shaped tensors.
    pub fn mean_of(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Tape("mean of nothing".into()))?;
        let mut v = self.value(first).clone();
        for &x in &xs[1..] {
            self.same_shape("mean_of", first, x)?;
            v.add_assign(self.value(x));
        }
        let k = xs.len() as f64;
        v.values_mut().iter_mut().for_each(|x| *x /= k);
        Ok(self.push(v, Op::MeanOf(xs.to_vec())))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).map(|x| leaky_relu(x, slope));
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Inverted dropout. `rng = None` is eval mode and returns `a` itself.
    pub fn dropout(&mut self, a: NodeId, rate: f64, rng: Option<&mut dyn RngCore>) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let rng = match rng {
            Some(r) if rate > 0.0 => r,
            _ => return Ok(a),
        };
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let mut v = self.value(a).clone();
        v.values_mut().iter_mut().zip(&mask).for_each(|(x, m)| *x *= m);
        Ok(self.push(v, Op::Dropout(a, mask)))
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Tape("concat of nothing".into()))?;
        let n = self.shape(first).0;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.0 != n {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.shape(first),
                    right: s,
                });
            }
            total += s.1;
        }
        let mut out = DenseTensor::zeros(n, total);
        let mut off = 0;
        for &x in xs {
            let v = self.value(x);
            let c = v.cols();
            for r in 0..n {
                for j in 0..c {
                    out.set(r, off + j, v.get(r, j));
                }
            }
            off += c;
        }
        Ok(self.push(out, Op::ConcatCols(xs.to_vec())))
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let n = self.shape(a).0;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Shape {
                op: "gather_rows",
                left: self.shape(a),
                right: (bad, 0),
            });
        }
        let v = self.value(a).gather_rows(rows);
        Ok(self.push(v, Op::GatherRows(a, rows.to_vec())))
    }

    /// Row-wise convex mixture: `out[i] = Σ_k weights[i,k] · inputs[k][i]`.
    pub fn mix(&mut self, weights: NodeId, inputs: &[NodeId]) -> Result<NodeId> {
        let (n, k) = self.shape(weights);
        if k != inputs.len() || k == 0 {
            return Err(Error::Shape {
                op: "mix",
                left: (n, k),
                right: (inputs.len(), 0),
            });
        }
        let m = self.shape(inputs[0]).1;
        for &x in inputs {
            if self.shape(x) != (n, m) {
                return Err(Error::Shape {
                    op: "mix",
                    left: (n, m),
                    right: self.shape(x),
                });
            }
        }
        let mut out = DenseTensor::zeros(n, m);
        {
            let w = self.value(weights);
            for (j, &x) in inputs.iter().enumerate() {
                let xv = self.value(x);
                for i in 0..n {
                    let g = w.get(i, j);
                    for c in 0..m {
                        out.values_mut()[i * m + c] += g * xv.get(i, c);
                    }
                }
            }
        }
        Ok(self.push(out, Op::Mix(weights, inputs.to_vec())))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).values().iter().sum();
        self.push(DenseTensor::scalar(s), Op::SumAll(a))
    }

    /// Mean over all entries, as a scalar.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Tape("mean of empty tensor".into()));
        }
        let s = v.values().iter().sum::<f64>() / v.len() as f64;
        Ok(self.push(DenseTensor::scalar(s), Op::Mean(a)))
    }

    /// `Σ_i w_i · BCE(sigmoid(z_i), y_i)` over an `n×1` column of logits.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64], weights: &[f64]) -> Result<NodeId> {
        let s = self.shape(logits);
        if s.1 != 1 || s.0 != targets.len() || s.0 != weights.len() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                left: s,
                right: (targets.len(), weights.len()),
            });
        }
        let total = self
            .value(logits)
            .values()
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&z, &y), &w)| w * bce_logit(z, y))
            .sum();
        Ok(self.push(
            DenseTensor::scalar(total),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// `Σ (pred - target)²` against a constant target.
    pub fn squared_error(&mut self, pred: NodeId, target: &DenseTensor) -> Result<NodeId> {
        let s = self.shape(pred);
        if s != target.shape() {
            return Err(Error::Shape {
                op: "squared_error",
                left: s,
                right: target.shape(),
            });
        }
        let total = self
            .value(pred)
            .values()
            .iter()
            .zip(target.values())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(
            DenseTensor::scalar(total),
            Op::SquaredError {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. The tape can be swept once.
    pub fn backward(&mut self, loss: NodeId, store: &ParamStore) -> Result<Gradients> {
        if !self.record {
            return Err(Error::Tape("backward on a no-grad tape".into()));
        }
        if self.consumed {
            return Err(Error::Tape("tape already consumed".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Tape(format!(
                "loss must be scalar, got {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;

        let mut adj: Vec<Option<DenseTensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(DenseTensor::scalar(1.0));
        let mut out = Gradients::zeros_like(store);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            let nodes = &self.nodes;
            let mut acc = |id: NodeId, d: DenseTensor| match &mut adj[id.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(pid) => {
                    if pid.0 >= out.grads.len() {
                        return Err(Error::UnknownParam(format!("#{}", pid.0)));
                    }
                    out.grads[pid.0].add_assign(&g);
                }
                Op::MatMul(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    acc(*a, g.matmul_t(bv));
                    acc(*b, av.t_matmul(&g));
                }
                Op::AddBias(a, b) => {
                    let m = g.cols();
                    let mut db = DenseTensor::zeros(1, m);
                    for row in g.values().chunks(m.max(1)) {
                        for (d, x) in db.values_mut().iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    acc(*b, db);
                    acc(*a, g);
                }
                Op::Add(a, b) => {
                    acc(*b, g.clone());
                    acc(*a, g);
                }
                Op::Sum(xs) => {
                    for x in xs {
                        acc(*x, g.clone());
                    }
                }
                Op::MeanOf(xs) => {
                    let k = xs.len() as f64;
                    let d = g.map(|v| v / k);
                    for x in xs {
                        acc(*x, d.clone());
                    }
                }
                Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
                Op::LeakyRelu(a, slope) => {
                    let d = zip_map(&g, &nodes[a.0].value, |gv, x| {
                        if x > 0.0 {
                            gv
                        } else {
                            gv * slope
                        }
                    });
                    acc(*a, d);
                }
                Op::Relu(a) => {
                    let d = zip_map(&g, &nodes[a.0].value, |gv, x| if x > 0.0 { gv } else { 0.0 });
                    acc(*a, d);
                }
                Op::Softplus(a) => {
                    let d = zip_map(&g, &nodes[a.0].value, |gv, x| gv * sigmoid(x));
                    acc(*a, d);
                }
                Op::Sigmoid(a) => {
                    let d = zip_map(&g, &node.value, |gv, s| gv * s * (1.0 - s));
                    acc(*a, d);
                }
                Op::SoftmaxRows(a) => {
                    let s = &node.value;
                    let m = s.cols();
                    let mut d = DenseTensor::zeros(s.rows(), m);
                    for r in 0..s.rows() {
                        let dot: f64 = (0..m).map(|c| g.get(r, c) * s.get(r, c)).sum();
                        for c in 0..m {
                            d.set(r, c, s.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    acc(*a, d);
                }
                Op::Dropout(a, mask) => {
                    let mut d = g;
                    d.values_mut().iter_mut().zip(mask).for_each(|(x, m)| *x *= m);
                    acc(*a, d);
                }
                Op::ConcatCols(xs) => {
                    let mut off = 0;
                    for x in xs {
                        let (n, c) = nodes[x.0].value.shape();
                        let mut d = DenseTensor::zeros(n, c);
                        for r in 0..n {
                            for j in 0..c {
                                d.set(r, j, g.get(r, off + j));
                            }
                        }
                        off += c;
                        acc(*x, d);
                    }
                }
                Op::GatherRows(a, rows) => {
                    let (n, m) = nodes[a.0].value.shape();
                    let mut d = DenseTensor::zeros(n, m);
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..m {
                            d.values_mut()[r * m + c] += g.get(i, c);
                        }
                    }
                    acc(*a, d);
                }
                Op::Mix(w, xs) => {
                    let wv = &nodes[w.0].value;
                    let (n, k) = wv.shape();
                    let m = g.cols();
                    let mut dw = DenseTensor::zeros(n, k);
                    for (j, x) in xs.iter().enumerate() {
                        let xv = &nodes[x.0].value;
                        let mut dx = DenseTensor::zeros(n, m);
                        for i in 0..n {
                            let gi = wv.get(i, j);
                            let mut dot = 0.0;
                            for c in 0..m {
                                let gc = g.get(i, c);
                                dot += gc * xv.get(i, c);
                                dx.values_mut()[i * m + c] = gi * gc;
                            }
                            dw.set(i, j, dot);
                        }
                        acc(*x, dx);
                    }
                    acc(*w, dw);
                }
                Op::SumAll(a) => {
                    let (n, m) = nodes[a.0].value.shape();
                    let s = g.values()[0];
                    acc(*a, DenseTensor::from_vec(n, m, vec![s; n * m])?);
                }
                Op::Mean(a) => {
                    let (n, m) = nodes[a.0].value.shape();
                    let s = g.values()[0] / (n * m) as f64;
                    acc(*a, DenseTensor::from_vec(n, m, vec![s; n * m])?);
                }
                Op::BceWithLogits {
                    logits,
                    targets,
                    weights,
                } => {
                    let s = g.values()[0];
                    let z = &nodes[logits.0].value;
                    let vals = z
                        .values()
                        .iter()
                        .zip(targets)
                        .zip(weights)
                        .map(|((&zi, &y), &w)| s * w * (sigmoid(zi) - y))
                        .collect();
                    acc(*logits, DenseTensor::from_vec(z.rows(), 1, vals)?);
                }
                Op::SquaredError { pred, target } => {
                    let s = g.values()[0];
                    let d = zip_map(&nodes[pred.0].value, target, |p, t| 2.0 * s * (p - t));
                    acc(*pred, d);
                }
            }
        }
        Ok(out)
    }
}

fn zip_map(a: &DenseTensor, b: &DenseTensor, f: impl Fn(f64, f64) -> f64) -> DenseTensor {
    let (r, c) = a.shape();
    let vals = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| f(x, y))
        .collect();
    DenseTensor::from_vec(r, c, vals).expect("zip_map preserves shape")
}

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `sigmoid(z)` against `y`, in logit space.
#[inline]
pub fn bce_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub fn softmax_rows(x: &DenseTensor) -> DenseTensor {
    let (n, m) = x.shape();
    let mut out = DenseTensor::zeros(n, m);
    for r in 0..n {
        let row = x.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (c, e) in exps.into_iter().enumerate() {
            out.set(r, c, e / z);
        }
    }
    out
}
