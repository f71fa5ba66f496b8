//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so every node's inputs precede it
//! and a single reverse sweep visits each node once. Reductions run in a
//! fixed index order; re-running the same program is bit-identical.

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Primitive kinds together with their static attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Broadcasting `a + b`.
    Add,
    /// Broadcasting `a - b`.
    Sub,
    ScalarScale(f64),
    /// Broadcasting elementwise product.
    Mul,
    /// `W [C', C]` applied to `X [.., C, D]` along the channel axis.
    ChannelContract,
    /// Broadcasting cross product over trailing 3-vectors.
    Cross,
    /// Broadcasting inner product over trailing 3-vectors.
    Dot,
    /// Euclidean norm of the last axis.
    Norm,
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    Mean { axis: usize },
    SumAll,
    Concat { axis: usize },
    GatherRows { indices: Vec<usize> },
    /// `mask ? a : b`, mask laid out like the (equal) input shapes.
    SelectWhere { mask: Vec<bool> },
    /// `M [.., 3, 3]` times `v [.., 3]`.
    Mat3Apply,
    TransposeLast2,
    Square,
    Sqrt,
    Log,
    Sigmoid,
    Reciprocal,
    Reshape { shape: Vec<usize> },
    /// Cross-product attention over points, per channel, for `Q, K, V [N, C, 3]`.
    CrossAttention { eps: f64 },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::ScalarScale(_) => "scalar_scale",
            Primitive::Mul => "elementwise_mul",
            Primitive::ChannelContract => "channel_contract",
            Primitive::Cross => "batched_cross",
            Primitive::Dot => "batched_dot",
            Primitive::Norm => "l2_norm_lastaxis",
            Primitive::Softmax { .. } => "softmax_axis",
            Primitive::LogSoftmax { .. } => "log_softmax_axis",
            Primitive::Mean { .. } => "mean_axis",
            Primitive::SumAll => "sum_all",
            Primitive::Concat { .. } => "concat_axis",
            Primitive::GatherRows { .. } => "gather_rows",
            Primitive::SelectWhere { .. } => "select_where",
            Primitive::Mat3Apply => "mat3_apply",
            Primitive::TransposeLast2 => "transpose_last2",
            Primitive::Square => "square",
            Primitive::Sqrt => "sqrt",
            Primitive::Log => "log",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Reciprocal => "reciprocal",
            Primitive::Reshape { .. } => "reshape",
            Primitive::CrossAttention { .. } => "cross_attention",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::ChannelContract
            | Primitive::Cross
            | Primitive::Dot
            | Primitive::SelectWhere { .. }
            | Primitive::Mat3Apply => Some(2),
            Primitive::CrossAttention { .. } => Some(3),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

struct Node {
    value: Tensor,
    prim: Option<Primitive>,
    inputs: Vec<Var>,
    trainable: bool,
    requires_grad: bool,
}

/// Records primitives as they are evaluated.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A trainable input; [`Tape::backward`] reports its gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            prim: None,
            inputs: vec![],
            trainable,
            requires_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn parameters(&self) -> impl Iterator<Item = Var> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.trainable)
            .map(|(i, _)| Var(i))
    }

    /// Evaluates `prim` on `inputs` and records the result.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        if let Some(k) = prim.arity() {
            if inputs.len() != k {
                return Err(Error::Contract(format!(
                    "{} takes {} inputs, got {}",
                    prim.name(),
                    k,
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(Error::Contract(format!("{} needs inputs", prim.name())));
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::Contract(format!("unknown var {}", bad.0)));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = forward(&prim, &values)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(prim.name().to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            prim: Some(prim),
            inputs: inputs.to_vec(),
            trainable: false,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract(format!("unknown var {}", loss.0)))?;
        if node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = vec![None; loss.0 + 1];

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].take() else { continue };
            let Some(prim) = &node.prim else {
                if node.trainable {
                    leaves[i] = Some(g);
                }
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = vjp(prim, &inputs, &node.value, &g);
            for (v, ig) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { leaves, shapes })
    }

    // Typed conveniences over `apply`.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Primitive::ScalarScale(s), &[a])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn channel_contract(&mut self, w: Var, x: Var) -> Result<Var> {
        self.apply(Primitive::ChannelContract, &[w, x])
    }
    pub fn cross(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Cross, &[a, b])
    }
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Dot, &[a, b])
    }
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Norm, &[a])
    }
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Softmax { axis }, &[a])
    }
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::LogSoftmax { axis }, &[a])
    }
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Mean { axis }, &[a])
    }
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SumAll, &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, parts)
    }
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::GatherRows { indices }, &[a])
    }
    pub fn select_where(&mut self, mask: Vec<bool>, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::SelectWhere { mask }, &[a, b])
    }
    pub fn mat3_apply(&mut self, m: Var, v: Var) -> Result<Var> {
        self.apply(Primitive::Mat3Apply, &[m, v])
    }
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::TransposeLast2, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Square, &[a])
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sqrt, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn reciprocal(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Reciprocal, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Primitive::Reshape {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }
    pub fn cross_attention(&mut self, q: Var, k: Var, v: Var, eps: f64) -> Result<Var> {
        self.apply(Primitive::CrossAttention { eps }, &[q, k, v])
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.leaves.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

// ---------------------------------------------------------------------------
// Broadcasting

struct Broadcast {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    same: bool,
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (a, b) = (pad(a), pad(b));
    let mut out_shape = Vec::with_capacity(rank);
    for d in 0..rank {
        let n = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(op, format!("cannot broadcast {:?} with {:?}", a, b)),
        };
        out_shape.push(n);
    }
    let strides = |s: &[usize]| {
        let mut st = vec![0; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            st[d] = if s[d] == 1 { 0 } else { acc };
            acc *= s[d];
        }
        st
    };
    Ok(Broadcast {
        same: a == b,
        a_strides: strides(&a),
        b_strides: strides(&b),
        out_shape,
    })
}

impl Broadcast {
    fn numel(&self) -> usize {
        self.out_shape.iter().product()
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.numel();
        if self.same {
            for i in 0..n {
                f(i, i, i);
            }
            return;
        }
        let rank = self.out_shape.len();
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..n {
            f(o, ia, ib);
            let mut d = rank;
            while d > 0 {
                d -= 1;
                idx[d] += 1;
                ia += self.a_strides[d];
                ib += self.b_strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                ia -= self.a_strides[d] * self.out_shape[d];
                ib -= self.b_strides[d] * self.out_shape[d];
                idx[d] = 0;
            }
        }
    }
}

fn split_vec3(op: &'static str, s: &[usize]) -> Result<Vec<usize>> {
    match s.split_last() {
        Some((3, lead)) => Ok(lead.to_vec()),
        _ => shape_err(op, format!("trailing axis must be 3, got {:?}", s)),
    }
}

/// Splits a shape into `(outer, n, inner)` around `axis`.
fn around_axis(op: &'static str, s: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= s.len() {
        return shape_err(op, format!("axis {} out of range for {:?}", axis, s));
    }
    Ok((
        s[..axis].iter().product(),
        s[axis],
        s[axis + 1..].iter().product(),
    ))
}

#[inline]
fn cross3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
fn dot3(a: &[f64], b: &[f64]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn domain<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Domain {
        op,
        detail: detail.into(),
    })
}

// ---------------------------------------------------------------------------
// Forward rules

/// Evaluates a primitive without recording it.
pub fn forward(prim: &Primitive, x: &[&Tensor]) -> Result<Tensor> {
    let op = prim.name();
    match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let bc = broadcast(op, x[0].shape(), x[1].shape())?;
            let (a, b) = (x[0].data(), x[1].data());
            let mut out = vec![0.0; bc.numel()];
            match prim {
                Primitive::Add => bc.for_each(|o, i, j| out[o] = a[i] + b[j]),
                Primitive::Sub => bc.for_each(|o, i, j| out[o] = a[i] - b[j]),
                _ => bc.for_each(|o, i, j| out[o] = a[i] * b[j]),
            }
            Tensor::new(bc.out_shape, out)
        }
        Primitive::ScalarScale(s) => Ok(x[0].map(|v| v * s)),
        Primitive::ChannelContract => {
            let (w, xs) = (x[0], x[1]);
            let (rows, c, d) = contract_dims(w.shape(), xs.shape())?;
            let cp = w.shape()[0];
            let xt = channels_first(xs.data(), rows, c, d);
            let m = rows * d;
            let mut ot = vec![0.0; cp * m];
            for (j, oj) in ot.chunks_exact_mut(m.max(1)).enumerate() {
                for (k, xk) in xt.chunks_exact(m.max(1)).enumerate() {
                    let wjk = w.data()[j * c + k];
                    oj.iter_mut().zip(xk).for_each(|(o, x)| *o += wjk * x);
                }
            }
            let mut shape = xs.shape().to_vec();
            let n = shape.len();
            shape[n - 2] = cp;
            Tensor::new(shape, channels_last(&ot, rows, cp, d))
        }
        Primitive::Cross | Primitive::Dot => {
            let la = split_vec3(op, x[0].shape())?;
            let lb = split_vec3(op, x[1].shape())?;
            let bc = broadcast(op, &la, &lb)?;
            let (a, b) = (x[0].data(), x[1].data());
            let mut shape = bc.out_shape.clone();
            if matches!(prim, Primitive::Cross) {
                let mut out = vec![0.0; bc.numel() * 3];
                bc.for_each(|o, i, j| {
                    let c = cross3(&a[i * 3..i * 3 + 3], &b[j * 3..j * 3 + 3]);
                    out[o * 3..o * 3 + 3].copy_from_slice(&c);
                });
                shape.push(3);
                Tensor::new(shape, out)
            } else {
                let mut out = vec![0.0; bc.numel()];
                bc.for_each(|o, i, j| out[o] = dot3(&a[i * 3..i * 3 + 3], &b[j * 3..j * 3 + 3]));
                Tensor::new(shape, out)
            }
        }
        Primitive::Norm => {
            let s = x[0].shape();
            let Some((&l, lead)) = s.split_last() else {
                return shape_err(op, "needs rank >= 1");
            };
            let out = x[0]
                .data()
                .chunks(l.max(1))
                .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            Tensor::new(lead.to_vec(), out)
        }
        Primitive::Softmax { axis } | Primitive::LogSoftmax { axis } => {
            let (outer, n, inner) = around_axis(op, x[0].shape(), *axis)?;
            let xd = x[0].data();
            let mut out = vec![0.0; xd.len()];
            let log = matches!(prim, Primitive::LogSoftmax { .. });
            for o in 0..outer {
                for i in 0..inner {
                    let at = |t: usize| (o * n + t) * inner + i;
                    let m = (0..n).map(|t| xd[at(t)]).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..n).map(|t| (xd[at(t)] - m).exp()).sum();
                    for t in 0..n {
                        out[at(t)] = if log {
                            xd[at(t)] - m - z.ln()
                        } else {
                            (xd[at(t)] - m).exp() / z
                        };
                    }
                }
            }
            Tensor::new(x[0].shape().to_vec(), out)
        }
        Primitive::Mean { axis } => {
            let (outer, n, inner) = around_axis(op, x[0].shape(), *axis)?;
            if n == 0 {
                return shape_err(op, "mean over empty axis");
            }
            let xd = x[0].data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for t in 0..n {
                    let row = &xd[(o * n + t) * inner..(o * n + t + 1) * inner];
                    out[o * inner..(o + 1) * inner]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(a, b)| *a += b);
                }
            }
            let inv = 1.0 / n as f64;
            out.iter_mut().for_each(|v| *v *= inv);
            let mut shape = x[0].shape().to_vec();
            shape.remove(*axis);
            Tensor::new(shape, out)
        }
        Primitive::SumAll => Ok(Tensor::scalar(x[0].data().iter().sum())),
        Primitive::Concat { axis } => {
            let first = x[0].shape();
            let mut total = 0;
            for t in x {
                let s = t.shape();
                if s.len() != first.len()
                    || *axis >= s.len()
                    || s.iter().enumerate().any(|(d, &e)| d != *axis && e != first[d])
                {
                    return shape_err(op, format!("{:?} vs {:?} on axis {}", first, s, axis));
                }
                total += s[*axis];
            }
            let outer: usize = first[..*axis].iter().product();
            let inner: usize = first[*axis + 1..].iter().product();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in x {
                    let n = t.shape()[*axis];
                    out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            Tensor::new(shape, out)
        }
        Primitive::GatherRows { indices } => {
            let s = x[0].shape();
            if s.is_empty() {
                return shape_err(op, "needs rank >= 1");
            }
            let row: usize = s[1..].iter().product();
            let xd = x[0].data();
            let mut out = Vec::with_capacity(indices.len() * row);
            for &r in indices {
                if r >= s[0] {
                    return Err(Error::Contract(format!("gather index {} >= {}", r, s[0])));
                }
                out.extend_from_slice(&xd[r * row..(r + 1) * row]);
            }
            let mut shape = s.to_vec();
            shape[0] = indices.len();
            Tensor::new(shape, out)
        }
        Primitive::SelectWhere { mask } => {
            if x[0].shape() != x[1].shape() || mask.len() != x[0].len() {
                return shape_err(
                    op,
                    format!("{:?}, {:?}, mask {}", x[0].shape(), x[1].shape(), mask.len()),
                );
            }
            let out = mask
                .iter()
                .zip(x[0].data().iter().zip(x[1].data()))
                .map(|(&m, (&a, &b))| if m { a } else { b })
                .collect();
            Tensor::new(x[0].shape().to_vec(), out)
        }
        Primitive::Mat3Apply => {
            let (m, v) = (x[0].shape(), x[1].shape());
            let lead = split_vec3(op, v)?;
            if m.len() != v.len() + 1 || m[..m.len() - 2] != lead[..] || m[m.len() - 2..] != [3, 3] {
                return shape_err(op, format!("{:?} applied to {:?}", m, v));
            }
            let (md, vd) = (x[0].data(), x[1].data());
            let mut out = vec![0.0; vd.len()];
            for r in 0..vd.len() / 3 {
                let mm = &md[r * 9..r * 9 + 9];
                let vv = &vd[r * 3..r * 3 + 3];
                for a in 0..3 {
                    out[r * 3 + a] = dot3(&mm[a * 3..a * 3 + 3], vv);
                }
            }
            Tensor::new(v.to_vec(), out)
        }
        Primitive::TransposeLast2 => {
            let s = x[0].shape();
            if s.len() < 2 {
                return shape_err(op, "needs rank >= 2");
            }
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            let xd = x[0].data();
            let mut out = vec![0.0; xd.len()];
            for b in 0..xd.len() / (r * c).max(1) {
                for i in 0..r {
                    for j in 0..c {
                        out[b * r * c + j * r + i] = xd[b * r * c + i * c + j];
                    }
                }
            }
            let mut shape = s.to_vec();
            let n = shape.len();
            shape.swap(n - 2, n - 1);
            Tensor::new(shape, out)
        }
        Primitive::Square => Ok(x[0].map(|v| v * v)),
        Primitive::Sqrt => {
            if let Some(v) = x[0].data().iter().find(|&&v| v < 0.0) {
                return domain(op, format!("negative input {}", v));
            }
            Ok(x[0].map(f64::sqrt))
        }
        Primitive::Log => {
            if let Some(v) = x[0].data().iter().find(|&&v| v <= 0.0) {
                return domain(op, format!("non-positive input {}", v));
            }
            Ok(x[0].map(f64::ln))
        }
        Primitive::Sigmoid => Ok(x[0].map(|v| 1.0 / (1.0 + (-v).exp()))),
        Primitive::Reciprocal => {
            if x[0].data().iter().any(|&v| v == 0.0) {
                return domain(op, "zero input");
            }
            Ok(x[0].map(|v| 1.0 / v))
        }
        Primitive::Reshape { shape } => x[0].clone().reshape(shape),
        Primitive::CrossAttention { eps } => {
            let (n, c) = attention_dims(x)?;
            let mut out = vec![0.0; n * c * 3];
            let mut e = vec![0.0; n];
            for ch in 0..c {
                let k = Soa::channel(x[1].data(), n, c, ch);
                let v = Soa::channel(x[2].data(), n, c, ch);
                for p in 0..n {
                    let at = (p * c + ch) * 3;
                    let qp = [x[0].data()[at], x[0].data()[at + 1], x[0].data()[at + 2]];
                    k.cross_norms(qp, &mut e);
                    softmax_in_place(&mut e);
                    let mut acc = [0.0; 3];
                    for q in 0..n {
                        let u = v.cross_from(qp, q);
                        let w = e[q] / ((u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt() + eps);
                        acc[0] += w * u[0];
                        acc[1] += w * u[1];
                        acc[2] += w * u[2];
                    }
                    out[at..at + 3].copy_from_slice(&acc);
                }
            }
            Tensor::new(vec![n, c, 3], out)
        }
    }
}

/// `[rows, c, d]` -> `[c, rows * d]`.
fn channels_first(x: &[f64], rows: usize, c: usize, d: usize) -> Vec<f64> {
    let m = rows * d;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for k in 0..c {
            for t in 0..d {
                out[k * m + r * d + t] = x[(r * c + k) * d + t];
            }
        }
    }
    out
}

/// Inverse of [`channels_first`].
fn channels_last(x: &[f64], rows: usize, c: usize, d: usize) -> Vec<f64> {
    let m = rows * d;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for k in 0..c {
            for t in 0..d {
                out[(r * c + k) * d + t] = x[k * m + r * d + t];
            }
        }
    }
    out
}

/// Dot product with four independent accumulators; the summation order is
/// fixed, so results are deterministic.
fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for t in 0..4 {
            acc[t] += x[t] * y[t];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn contract_dims(w: &[usize], x: &[usize]) -> Result<(usize, usize, usize)> {
    if w.len() != 2 || x.len() < 2 || x[x.len() - 2] != w[1] {
        return shape_err(
            "channel_contract",
            format!("weight {:?} against input {:?}", w, x),
        );
    }
    let d = x[x.len() - 1];
    let c = w[1];
    let rows = x[..x.len() - 2].iter().product();
    Ok((rows, c, d))
}

fn attention_dims(x: &[&Tensor]) -> Result<(usize, usize)> {
    let s = x[0].shape();
    if s.len() != 3 || s[2] != 3 || x[1].shape() != s || x[2].shape() != s {
        return shape_err(
            "cross_attention",
            format!("{:?}, {:?}, {:?}", s, x[1].shape(), x[2].shape()),
        );
    }
    if s[0] == 0 {
        return shape_err("cross_attention", "no points");
    }
    Ok((s[0], s[1]))
}

/// One channel of an `[N, C, 3]` tensor as coordinate columns.
struct Soa {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
}

impl Soa {
    fn channel(d: &[f64], n: usize, c: usize, ch: usize) -> Self {
        let col = |t: usize| (0..n).map(|q| d[(q * c + ch) * 3 + t]).collect();
        Self {
            x: col(0),
            y: col(1),
            z: col(2),
        }
    }

    fn zeros(n: usize) -> Self {
        Self {
            x: vec![0.0; n],
            y: vec![0.0; n],
            z: vec![0.0; n],
        }
    }

    #[inline]
    fn get(&self, q: usize) -> [f64; 3] {
        [self.x[q], self.y[q], self.z[q]]
    }

    /// `a x self[q]`.
    #[inline]
    fn cross_from(&self, a: [f64; 3], q: usize) -> [f64; 3] {
        [
            a[1] * self.z[q] - a[2] * self.y[q],
            a[2] * self.x[q] - a[0] * self.z[q],
            a[0] * self.y[q] - a[1] * self.x[q],
        ]
    }

    /// `out[q] = |a x self[q]|`.
    fn cross_norms(&self, a: [f64; 3], out: &mut [f64]) {
        for (q, o) in out.iter_mut().enumerate() {
            let u = self.cross_from(a, q);
            *o = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        }
    }

    #[inline]
    fn add(&mut self, q: usize, v: [f64; 3]) {
        self.x[q] += v[0];
        self.y[q] += v[1];
        self.z[q] += v[2];
    }

    fn scatter(&self, d: &mut [f64], c: usize, ch: usize) {
        for q in 0..self.x.len() {
            let at = (q * c + ch) * 3;
            d[at] += self.x[q];
            d[at + 1] += self.y[q];
            d[at + 2] += self.z[q];
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for l in row.iter_mut() {
        *l = (*l - m).exp();
        z += *l;
    }
    let inv = 1.0 / z;
    row.iter_mut().for_each(|l| *l *= inv);
}

/// Attention weights `[C, N, N]` for queries `q` and keys `k` of shape `[N, C, 3]`.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (n, c) = attention_dims(&[q, k, k])?;
    let mut out = vec![0.0; c * n * n];
    for ch in 0..c {
        let ks = Soa::channel(k.data(), n, c, ch);
        for p in 0..n {
            let at = (p * c + ch) * 3;
            let row = &mut out[(ch * n + p) * n..(ch * n + p + 1) * n];
            ks.cross_norms([q.data()[at], q.data()[at + 1], q.data()[at + 2]], row);
            softmax_in_place(row);
        }
    }
    Tensor::new(vec![c, n, n], out)
}

// ---------------------------------------------------------------------------
// Vector-Jacobian rules

fn vjp(prim: &Primitive, x: &[&Tensor], y: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
    let op = prim.name();
    match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let bc = broadcast(op, x[0].shape(), x[1].shape()).expect("checked in forward");
            let mut ga = vec![0.0; x[0].len()];
            let mut gb = vec![0.0; x[1].len()];
            let (a, b) = (x[0].data(), x[1].data());
            match prim {
                Primitive::Add => bc.for_each(|o, i, j| {
                    ga[i] += g[o];
                    gb[j] += g[o];
                }),
                Primitive::Sub => bc.for_each(|o, i, j| {
                    ga[i] += g[o];
                    gb[j] -= g[o];
                }),
                _ => bc.for_each(|o, i, j| {
                    ga[i] += g[o] * b[j];
                    gb[j] += g[o] * a[i];
                }),
            }
            vec![ga, gb]
        }
        Primitive::ScalarScale(s) => vec![g.iter().map(|v| v * s).collect()],
        Primitive::ChannelContract => {
            let (w, xs) = (x[0], x[1]);
            let (rows, c, d) = contract_dims(w.shape(), xs.shape()).expect("checked in forward");
            let cp = w.shape()[0];
            let m = (rows * d).max(1);
            let xt = channels_first(xs.data(), rows, c, d);
            let gt = channels_first(g, rows, cp, d);
            let mut gw = vec![0.0; cp * c];
            let mut gxt = vec![0.0; c * rows * d];
            for (j, gj) in gt.chunks_exact(m).enumerate() {
                for (k, (xk, gxk)) in xt.chunks_exact(m).zip(gxt.chunks_exact_mut(m)).enumerate() {
                    let wjk = w.data()[j * c + k];
                    gw[j * c + k] = dot_slices(gj, xk);
                    gxk.iter_mut().zip(gj).for_each(|(o, g)| *o += wjk * g);
                }
            }
            vec![gw, channels_last(&gxt, rows, c, d)]
        }
        Primitive::Cross | Primitive::Dot => {
            let la = split_vec3(op, x[0].shape()).expect("checked in forward");
            let lb = split_vec3(op, x[1].shape()).expect("checked in forward");
            let bc = broadcast(op, &la, &lb).expect("checked in forward");
            let (a, b) = (x[0].data(), x[1].data());
            let mut ga = vec![0.0; a.len()];
            let mut gb = vec![0.0; b.len()];
            if matches!(prim, Primitive::Cross) {
                bc.for_each(|o, i, j| {
                    let go = &g[o * 3..o * 3 + 3];
                    let av = &a[i * 3..i * 3 + 3];
                    let bv = &b[j * 3..j * 3 + 3];
                    let da = cross3(bv, go);
                    let db = cross3(go, av);
                    for t in 0..3 {
                        ga[i * 3 + t] += da[t];
                        gb[j * 3 + t] += db[t];
                    }
                });
            } else {
                bc.for_each(|o, i, j| {
                    for t in 0..3 {
                        ga[i * 3 + t] += g[o] * b[j * 3 + t];
                        gb[j * 3 + t] += g[o] * a[i * 3 + t];
                    }
                });
            }
            vec![ga, gb]
        }
        Primitive::Norm => {
            let l = *x[0].shape().last().expect("checked in forward");
            let xd = x[0].data();
            let mut gx = vec![0.0; xd.len()];
            for (r, &n) in y.data().iter().enumerate() {
                if n > 0.0 {
                    for t in 0..l {
                        gx[r * l + t] = g[r] * xd[r * l + t] / n;
                    }
                }
            }
            vec![gx]
        }
        Primitive::Softmax { axis } | Primitive::LogSoftmax { axis } => {
            let (outer, n, inner) = around_axis(op, x[0].shape(), *axis).expect("checked in forward");
            let yd = y.data();
            let mut gx = vec![0.0; yd.len()];
            let log = matches!(prim, Primitive::LogSoftmax { .. });
            for o in 0..outer {
                for i in 0..inner {
                    let at = |t: usize| (o * n + t) * inner + i;
                    if log {
                        let s: f64 = (0..n).map(|t| g[at(t)]).sum();
                        for t in 0..n {
                            gx[at(t)] = g[at(t)] - yd[at(t)].exp() * s;
                        }
                    } else {
                        let s: f64 = (0..n).map(|t| g[at(t)] * yd[at(t)]).sum();
                        for t in 0..n {
                            gx[at(t)] = yd[at(t)] * (g[at(t)] - s);
                        }
                    }
                }
            }
            vec![gx]
        }
        Primitive::Mean { axis } => {
            let (outer, n, inner) = around_axis(op, x[0].shape(), *axis).expect("checked in forward");
            let inv = 1.0 / n as f64;
            let mut gx = vec![0.0; x[0].len()];
            for o in 0..outer {
                for t in 0..n {
                    for i in 0..inner {
                        gx[(o * n + t) * inner + i] = g[o * inner + i] * inv;
                    }
                }
            }
            vec![gx]
        }
        Primitive::SumAll => vec![vec![g[0]; x[0].len()]],
        Primitive::Concat { axis } => {
            let first = x[0].shape();
            let outer: usize = first[..*axis].iter().product();
            let inner: usize = first[*axis + 1..].iter().product();
            let total: usize = x.iter().map(|t| t.shape()[*axis]).sum();
            let mut grads: Vec<Vec<f64>> = x.iter().map(|t| Vec::with_capacity(t.len())).collect();
            for o in 0..outer {
                let mut at = o * total * inner;
                for (t, gt) in x.iter().zip(grads.iter_mut()) {
                    let len = t.shape()[*axis] * inner;
                    gt.extend_from_slice(&g[at..at + len]);
                    at += len;
                }
            }
            grads
        }
        Primitive::GatherRows { indices } => {
            let row: usize = x[0].shape()[1..].iter().product();
            let mut gx = vec![0.0; x[0].len()];
            for (i, &r) in indices.iter().enumerate() {
                for t in 0..row {
                    gx[r * row + t] += g[i * row + t];
                }
            }
            vec![gx]
        }
        Primitive::SelectWhere { mask } => {
            let ga = mask.iter().zip(g).map(|(&m, &v)| if m { v } else { 0.0 }).collect();
            let gb = mask.iter().zip(g).map(|(&m, &v)| if m { 0.0 } else { v }).collect();
            vec![ga, gb]
        }
        Primitive::Mat3Apply => {
            let (md, vd) = (x[0].data(), x[1].data());
            let mut gm = vec![0.0; md.len()];
            let mut gv = vec![0.0; vd.len()];
            for r in 0..vd.len() / 3 {
                for a in 0..3 {
                    let ga = g[r * 3 + a];
                    for b in 0..3 {
                        gm[r * 9 + a * 3 + b] = ga * vd[r * 3 + b];
                        gv[r * 3 + b] += md[r * 9 + a * 3 + b] * ga;
                    }
                }
            }
            vec![gm, gv]
        }
        Primitive::TransposeLast2 => {
            let s = x[0].shape();
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            let mut gx = vec![0.0; g.len()];
            for b in 0..g.len() / (r * c).max(1) {
                for i in 0..r {
                    for j in 0..c {
                        gx[b * r * c + i * c + j] = g[b * r * c + j * r + i];
                    }
                }
            }
            vec![gx]
        }
        Primitive::Square => vec![x[0].data().iter().zip(g).map(|(v, g)| 2.0 * v * g).collect()],
        Primitive::Sqrt => vec![y
            .data()
            .iter()
            .zip(g)
            .map(|(&s, &g)| if s > 0.0 { g / (2.0 * s) } else { 0.0 })
            .collect()],
        Primitive::Log => vec![x[0].data().iter().zip(g).map(|(v, g)| g / v).collect()],
        Primitive::Sigmoid => vec![y.data().iter().zip(g).map(|(s, g)| g * s * (1.0 - s)).collect()],
        Primitive::Reciprocal => vec![y.data().iter().zip(g).map(|(r, g)| -g * r * r).collect()],
        Primitive::Reshape { .. } => vec![g.to_vec()],
        Primitive::CrossAttention { eps } => attention_vjp(x, *eps, g),
    }
}

fn attention_vjp(x: &[&Tensor], eps: f64, g: &[f64]) -> Vec<Vec<f64>> {
    let (n, c) = attention_dims(x).expect("checked in forward");
    let qd = x[0].data();
    let mut gq = vec![0.0; qd.len()];
    let mut gk = vec![0.0; qd.len()];
    let mut gv = vec![0.0; qd.len()];
    let mut logits = vec![0.0; n];
    let mut alpha = vec![0.0; n];
    let mut galpha = vec![0.0; n];
    for ch in 0..c {
        let k = Soa::channel(x[1].data(), n, c, ch);
        let v = Soa::channel(x[2].data(), n, c, ch);
        let mut gks = Soa::zeros(n);
        let mut gvs = Soa::zeros(n);
        for p in 0..n {
            let at = (p * c + ch) * 3;
            let qp = [qd[at], qd[at + 1], qd[at + 2]];
            let gp = [g[at], g[at + 1], g[at + 2]];
            k.cross_norms(qp, &mut logits);
            alpha.copy_from_slice(&logits);
            softmax_in_place(&mut alpha);

            // dL/dalpha_q = w_q <G, u_q> with u_q = q_p x v_q, w_q = 1 / (|u_q| + eps).
            let mut mean_g = 0.0;
            let mut gqp = [0.0; 3];
            for q in 0..n {
                let u = v.cross_from(qp, q);
                let un = dot3(&u, &u).sqrt();
                let w = 1.0 / (un + eps);
                let gu_dot = dot3(&gp, &u);
                galpha[q] = w * gu_dot;
                mean_g += alpha[q] * galpha[q];

                let aw = alpha[q] * w;
                let s = if un > 0.0 { aw * gu_dot * w / un } else { 0.0 };
                let du = [aw * gp[0] - s * u[0], aw * gp[1] - s * u[1], aw * gp[2] - s * u[2]];
                let dq = cross3(&v.get(q), &du);
                gqp[0] += dq[0];
                gqp[1] += dq[1];
                gqp[2] += dq[2];
                gvs.add(q, cross3(&du, &qp));
            }

            // Softmax, then the logit norms |q_p x k_q|.
            for q in 0..n {
                let ds = alpha[q] * (galpha[q] - mean_g);
                let l = logits[q];
                if l == 0.0 || ds == 0.0 {
                    continue;
                }
                let a = k.cross_from(qp, q);
                let r = ds / l;
                let da = [r * a[0], r * a[1], r * a[2]];
                let dq = cross3(&k.get(q), &da);
                gqp[0] += dq[0];
                gqp[1] += dq[1];
                gqp[2] += dq[2];
                gks.add(q, cross3(&da, &qp));
            }
            for t in 0..3 {
                gq[at + t] += gqp[t];
            }
        }
        gks.scatter(&mut gk, c, ch);
        gvs.scatter(&mut gv, c, ch);
    }
    vec![gq, gk, gv]
}

