//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value. Inputs always
//! have smaller ids than the node that consumes them, so the node list is a
//! topological order and backward is a single reverse sweep.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};

use super::kernels::{self, split_axis};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

static FAULT_SOFTPLUS: AtomicBool = AtomicBool::new(false);

/// Corrupt the softplus backward rule (scales it by 1.01) for the whole
/// process. Only used as a negative control for gradient checking.
pub fn inject_softplus_fault(enabled: bool) {
    FAULT_SOFTPLUS.store(enabled, Ordering::SeqCst);
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Softplus,
    Tanh,
    Logistic,
    Exp,
    Log,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Softplus => kernels::softplus(x),
            Unary::Tanh => x.tanh(),
            Unary::Logistic => kernels::logistic(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            // subgradient at 0 is 0
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Softplus => {
                let d = kernels::logistic(x);
                if FAULT_SOFTPLUS.load(Ordering::Relaxed) {
                    d * 1.01
                } else {
                    d
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Logistic => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Max,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    SumAll(Var),
    SumAxis(Var, usize),
    Broadcast(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    /// Source element per output element; `usize::MAX` for empty segments.
    ScatterMax(Var, Vec<usize>),
    ScatterMean(Var, Vec<usize>, Vec<usize>),
    WeightedGather {
        input: Var,
        rows: Vec<usize>,
        weights: Vec<f64>,
        taps: usize,
    },
    CpVolume(Var, Var, Var),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Unary(..) => "unary",
            Op::Clamp(..) => "clamp",
            Op::MatMul(..) => "matmul",
            Op::SumAll(..) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::Broadcast(..) => "broadcast",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Reshape(..) => "reshape",
            Op::Gather(..) => "gather",
            Op::ScatterMax(..) => "scatter_max",
            Op::ScatterMean(..) => "scatter_mean",
            Op::WeightedGather { .. } => "weighted_gather",
            Op::CpVolume(..) => "cp_volume",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], keyed by leaf node id.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.map.get(&var.0)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }
}

/// Append-only operation record. Confined to one thread; build one per
/// forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Bind a named parameter. Repeated binds of the same name in one graph
    /// return the same leaf so gradients accumulate in one place.
    pub fn bind_param(&mut self, name: &str, value: &Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), trainable);
        self.params.insert(name.to_owned(), v);
        v
    }

    /// Make `var` the node returned by later binds of `name`.
    pub fn register_param(&mut self, name: &str, var: Var) {
        self.params.insert(name.to_owned(), var);
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Gradients of every bound parameter, by name. Parameters the loss does
    /// not reach get zero gradients.
    pub fn named_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(_, v)| self.rg(**v))
            .map(|(name, v)| {
                let g = grads.get(*v).cloned().unwrap_or_else(|| {
                    Tensor::from_parts(self.shape(*v).to_vec(), vec![0.0; self.value(*v).numel()])
                });
                (name.clone(), g)
            })
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.kind(), a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let va = self.value(a);
        let out = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        self.map(a, Op::Unary(a, kind), |x| kind.apply(x))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn logistic(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Logistic)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, removing it. A rank-1 input reduces to shape `[1]`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "sum_axis: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(a).get(axis).ok_or_else(|| {
            Error::InvalidArgument(format!("mean_axis: axis {axis} out of range"))
        })?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Broadcast with numpy trailing alignment.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let compatible = in_shape.len() <= shape.len()
            && in_shape
                .iter()
                .rev()
                .zip(shape.iter().rev())
                .all(|(&i, &o)| i == o || i == 1)
            && shape.iter().all(|&e| e > 0);
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: in_shape,
                rhs: shape.to_vec(),
            });
        }
        if in_shape == shape {
            return Ok(a);
        }
        let map = kernels::broadcast_index_map(&in_shape, shape);
        let src = self.value(a).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Broadcast(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidArgument(format!(
                "concat: axis {axis} out of range for {base:?}"
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(inputs.to_vec(), axis), rg))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Slice(a, axis, start), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Select rows (slices along axis 0) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let row = numel(&shape[1..]);
        if rows.is_empty() {
            return Err(Error::InvalidArgument("gather of zero rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(Error::InvalidArgument(format!(
                "gather: row {bad} out of range for {shape:?}"
            )));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            data.extend_from_slice(&src[r * row..(r + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Gather(a, rows.to_vec()), rg))
    }

    /// Reduce rows of a rank-2 tensor into `segments` output rows. Empty
    /// segments are zero.
    pub fn scatter_reduce(
        &mut self,
        a: Var,
        segment_of_row: &[usize],
        segments: usize,
        reduce: Reduce,
    ) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || segment_of_row.len() != shape[0] || segments == 0 {
            return Err(Error::ShapeMismatch {
                op: "scatter_reduce",
                lhs: shape,
                rhs: vec![segment_of_row.len(), segments],
            });
        }
        if let Some(&bad) = segment_of_row.iter().find(|&&s| s >= segments) {
            return Err(Error::InvalidArgument(format!(
                "scatter_reduce: segment {bad} out of range {segments}"
            )));
        }
        let c = shape[1];
        let src = self.value(a).data();
        let rg = self.rg(a);
        match reduce {
            Reduce::Max => {
                let mut arg = vec![usize::MAX; segments * c];
                let mut data = vec![0.0; segments * c];
                for (r, &s) in segment_of_row.iter().enumerate() {
                    for ch in 0..c {
                        let e = s * c + ch;
                        let v = src[r * c + ch];
                        if arg[e] == usize::MAX || v > data[e] {
                            arg[e] = r * c + ch;
                            data[e] = v;
                        }
                    }
                }
                Ok(self.push(
                    Tensor::from_parts(vec![segments, c], data),
                    Op::ScatterMax(a, arg),
                    rg,
                ))
            }
            Reduce::Mean => {
                let mut counts = vec![0usize; segments];
                let mut data = vec![0.0; segments * c];
                for (r, &s) in segment_of_row.iter().enumerate() {
                    counts[s] += 1;
                    for ch in 0..c {
                        data[s * c + ch] += src[r * c + ch];
                    }
                }
                for (s, &n) in counts.iter().enumerate() {
                    if n > 0 {
                        for v in &mut data[s * c..(s + 1) * c] {
                            *v /= n as f64;
                        }
                    }
                }
                Ok(self.push(
                    Tensor::from_parts(vec![segments, c], data),
                    Op::ScatterMean(a, segment_of_row.to_vec(), counts),
                    rg,
                ))
            }
        }
    }

    /// `out[q] = Σ_t weights[q·taps + t] · a[rows[q·taps + t]]` for a rank-2 `a`.
    /// Weights are constants.
    pub fn weighted_gather(
        &mut self,
        a: Var,
        rows: &[usize],
        weights: &[f64],
        taps: usize,
    ) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2
            || taps == 0
            || rows.len() != weights.len()
            || rows.is_empty()
            || !rows.len().is_multiple_of(taps)
        {
            return Err(Error::ShapeMismatch {
                op: "weighted_gather",
                lhs: shape,
                rhs: vec![rows.len(), weights.len(), taps],
            });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(Error::InvalidArgument(format!(
                "weighted_gather: row {bad} out of range for {shape:?}"
            )));
        }
        let c = shape[1];
        let q = rows.len() / taps;
        let src = self.value(a).data();
        let mut data = vec![0.0; q * c];
        for (qi, out) in data.chunks_mut(c).enumerate() {
            for t in 0..taps {
                let idx = qi * taps + t;
                let w = weights[idx];
                let row = &src[rows[idx] * c..(rows[idx] + 1) * c];
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += w * v;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![q, c], data),
            Op::WeightedGather {
                input: a,
                rows: rows.to_vec(),
                weights: weights.to_vec(),
                taps,
            },
            rg,
        ))
    }

    /// Rank-R CP contraction of three axis factors `[H,R,d]`, `[W,R,d]`,
    /// `[D,R,d]` into a `[H,W,D,d]` volume:
    /// `out[i,j,k,t] = Σ_r x[i,r,t]·y[j,r,t]·z[k,r,t]`.
    pub fn cp_volume(&mut self, x: Var, y: Var, z: Var) -> Result<Var> {
        let (sx, sy, sz) = (self.shape(x), self.shape(y), self.shape(z));
        let ok = sx.len() == 3
            && sy.len() == 3
            && sz.len() == 3
            && sx[1] == sy[1]
            && sy[1] == sz[1]
            && sx[2] == sy[2]
            && sy[2] == sz[2];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "cp_volume",
                lhs: sx.to_vec(),
                rhs: [sy, sz].concat(),
            });
        }
        let (h, w, dd, r, d) = (sx[0], sy[0], sz[0], sx[1], sx[2]);
        let (vx, vy, vz) = (self.value(x).data(), self.value(y).data(), self.value(z).data());
        let rd = r * d;
        let mut data = vec![0.0; h * w * dd * d];
        let mut pair = vec![0.0; rd];
        for i in 0..h {
            for j in 0..w {
                for e in 0..rd {
                    pair[e] = vx[i * rd + e] * vy[j * rd + e];
                }
                for k in 0..dd {
                    let out = &mut data[((i * w + j) * dd + k) * d..][..d];
                    let zk = &vz[k * rd..(k + 1) * rd];
                    for rr in 0..r {
                        for t in 0..d {
                            out[t] += pair[rr * d + t] * zk[rr * d + t];
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(y) || self.rg(z);
        Ok(self.push(
            Tensor::from_parts(vec![h, w, dd, d], data),
            Op::CpVolume(x, y, z),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every leaf
    /// that requires grad; leaves the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let mut map = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let data = grads[id].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                map.insert(id, Tensor::from_parts(node.value.shape().to_vec(), data));
            }
        }
        for (id, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                map.insert(
                    id,
                    Tensor::from_parts(node.value.shape().to_vec(), vec![0.0; node.value.numel()]),
                );
            }
        }
        Ok(Gradients { map })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, &x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(g).zip(vb) {
                        *o += x * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(g).zip(va) {
                        *o += x * y;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |buf| {
                buf.iter_mut().zip(g).for_each(|(o, &x)| *o += c * x)
            }),
            Op::AddScalar(a) => acc(*a, &mut |buf| add_into(buf, g)),
            Op::Unary(a, kind) => {
                let (x, y) = (val(*a), node.value.data());
                acc(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * kind.derivative(x[i], y[i]);
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                acc(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if nodes[a.0].requires_grad {
                    let da = kernels::matmul_nt(g, val(*b), m, k, n);
                    acc(*a, &mut |buf| add_into(buf, &da));
                }
                if nodes[b.0].requires_grad {
                    let db = kernels::matmul_tn(val(*a), g, m, k, n);
                    acc(*b, &mut |buf| add_into(buf, &db));
                }
            }
            Op::SumAll(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = split_axis(nodes[a.0].value.shape(), *axis);
                acc(*a, &mut |buf| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            add_into(&mut buf[base..base + inner], &g[o * inner..(o + 1) * inner]);
                        }
                    }
                });
            }
            Op::Broadcast(a) => {
                let map =
                    kernels::broadcast_index_map(nodes[a.0].value.shape(), node.value.shape());
                acc(*a, &mut |buf| {
                    for (e, &src) in map.iter().enumerate() {
                        buf[src] += g[e];
                    }
                });
            }
            Op::Concat(inputs, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = nodes[v.0].value.shape()[*axis];
                    acc(v, &mut |buf| {
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            add_into(
                                &mut buf[o * len * inner..(o + 1) * len * inner],
                                &g[from..from + len * inner],
                            );
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice(a, axis, start) => {
                let (outer, full, inner) = split_axis(nodes[a.0].value.shape(), *axis);
                let len = node.value.shape()[*axis];
                acc(*a, &mut |buf| {
                    for o in 0..outer {
                        let to = (o * full + start) * inner;
                        add_into(
                            &mut buf[to..to + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |buf| add_into(buf, g)),
            Op::Gather(a, rows) => {
                let row = numel(&nodes[a.0].value.shape()[1..]);
                acc(*a, &mut |buf| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut buf[r * row..(r + 1) * row], &g[i * row..(i + 1) * row]);
                    }
                });
            }
            Op::ScatterMax(a, arg) => acc(*a, &mut |buf| {
                for (e, &src) in arg.iter().enumerate() {
                    if src != usize::MAX {
                        buf[src] += g[e];
                    }
                }
            }),
            Op::ScatterMean(a, seg, counts) => {
                let c = node.value.shape()[1];
                acc(*a, &mut |buf| {
                    for (r, &s) in seg.iter().enumerate() {
                        let inv = 1.0 / counts[s] as f64;
                        for ch in 0..c {
                            buf[r * c + ch] += g[s * c + ch] * inv;
                        }
                    }
                });
            }
            Op::WeightedGather {
                input,
                rows,
                weights,
                taps,
            } => {
                let c = node.value.shape()[1];
                acc(*input, &mut |buf| {
                    for (idx, (&r, &w)) in rows.iter().zip(weights).enumerate() {
                        let q = idx / taps;
                        let gq = &g[q * c..(q + 1) * c];
                        for (o, &x) in buf[r * c..(r + 1) * c].iter_mut().zip(gq) {
                            *o += w * x;
                        }
                    }
                });
            }
            Op::CpVolume(x, y, z) => {
                let (sx, sy, sz) = (
                    nodes[x.0].value.shape(),
                    nodes[y.0].value.shape(),
                    nodes[z.0].value.shape(),
                );
                let (h, w, dd, r, d) = (sx[0], sy[0], sz[0], sx[1], sx[2]);
                let (vx, vy, vz) = (val(*x), val(*y), val(*z));
                let rd = r * d;
                let mut gx = vec![0.0; h * rd];
                let mut gy = vec![0.0; w * rd];
                let mut gz = vec![0.0; dd * rd];
                let mut pair = vec![0.0; rd];
                let mut s = vec![0.0; rd];
                for i in 0..h {
                    for j in 0..w {
                        for e in 0..rd {
                            pair[e] = vx[i * rd + e] * vy[j * rd + e];
                        }
                        s.iter_mut().for_each(|v| *v = 0.0);
                        for k in 0..dd {
                            let gk = &g[((i * w + j) * dd + k) * d..][..d];
                            let zk = &vz[k * rd..(k + 1) * rd];
                            let gzk = &mut gz[k * rd..(k + 1) * rd];
                            for rr in 0..r {
                                for t in 0..d {
                                    let e = rr * d + t;
                                    gzk[e] += gk[t] * pair[e];
                                    s[e] += gk[t] * zk[e];
                                }
                            }
                        }
                        for e in 0..rd {
                            gx[i * rd + e] += s[e] * vy[j * rd + e];
                            gy[j * rd + e] += s[e] * vx[i * rd + e];
                        }
                    }
                }
                acc(*x, &mut |buf| add_into(buf, &gx));
                acc(*y, &mut |buf| add_into(buf, &gy));
                acc(*z, &mut |buf| add_into(buf, &gz));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
