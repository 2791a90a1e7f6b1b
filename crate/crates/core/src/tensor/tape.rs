//! Wengert tape: every op appends a node; `backward` replays in reverse.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;

use super::kernels::{self, Layout};
use super::params::{ParamId, ParamStore};
use super::{Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    Add,
    Sub,
    Mul,
    ScalarMul,
    Concat,
    Slice,
    Reshape,
    Sum,
    Mean,
    SumAxis,
    MeanAxis,
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Cos,
    Square,
    LayerNorm,
    Dropout,
    Mse,
    BceWithLogits,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpKind::Leaf => "leaf",
            OpKind::Param => "param",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "elementwise-mul",
            OpKind::ScalarMul => "scalar-mul",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis => "sum-axis",
            OpKind::MeanAxis => "mean-axis",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Cos => "cos",
            OpKind::Square => "square",
            OpKind::LayerNorm => "layer-norm",
            OpKind::Dropout => "dropout",
            OpKind::Mse => "mse",
            OpKind::BceWithLogits => "bce-with-logits",
        };
        f.write_str(s)
    }
}

/// Lower clamp applied before `log`.
pub const LOG_FLOOR: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Cos,
    Square,
}

impl Unary {
    fn kind(self) -> OpKind {
        match self {
            Unary::Relu => OpKind::Relu,
            Unary::Gelu => OpKind::Gelu,
            Unary::Sigmoid => OpKind::Sigmoid,
            Unary::Tanh => OpKind::Tanh,
            Unary::Exp => OpKind::Exp,
            Unary::Log => OpKind::Log,
            Unary::Cos => OpKind::Cos,
            Unary::Square => OpKind::Square,
        }
    }
}

enum Op<S> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, S),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    Unary(Var, Unary),
    LayerNorm { x: Var, inv_std: Vec<S> },
    Dropout { x: Var, mask: Vec<S> },
    Mse(Var, Var),
    Bce { logits: Var, labels: Var },
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::ScalarMul(..) => OpKind::ScalarMul,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::Unary(_, u) => u.kind(),
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Mse(..) => OpKind::Mse,
            Op::Bce { .. } => OpKind::BceWithLogits,
        }
    }
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], kept for leaves and parameters.
pub struct Gradients<S: Scalar> {
    grads: HashMap<usize, Tensor<S>>,
    bindings: Vec<(ParamId, Var)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(&v.0)
    }

    pub fn bindings(&self) -> &[(ParamId, Var)] {
        &self.bindings
    }
}

/// Records a forward computation for one reverse pass.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    bound: HashMap<ParamId, Var>,
    bindings: Vec<(ParamId, Var)>,
    fault: Option<(OpKind, usize)>,
    consumed: bool,
    train: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            bindings: Vec::new(),
            fault: None,
            consumed: false,
            train: true,
        }
    }

    /// A tape in evaluation mode: dropout is the identity.
    pub fn eval() -> Self {
        Self {
            train: false,
            ..Self::new()
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First op that produced a NaN or Inf, if any.
    pub fn fault(&self) -> Option<TensorError> {
        self.fault
            .map(|(op, node)| TensorError::NonFinite { op, node })
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.fault() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some((op.kind(), idx));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(idx)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter; repeated calls return the same node so that
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, !p.frozen);
        self.bound.insert(id, v);
        self.bindings.push((id, v));
        v
    }

    fn shape_err(&self, op: OpKind, a: Var, b: Var) -> TensorError {
        TensorError::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn invalid(op: OpKind, msg: impl Into<String>) -> TensorError {
        TensorError::Invalid {
            op,
            msg: msg.into(),
        }
    }

    // --- binary elementwise ---------------------------------------------

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        kind: OpKind,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape =
            kernels::broadcast_shape(sa, sb).ok_or_else(|| self.shape_err(kind, a, b))?;
        let la = Layout::new(sa, &out_shape);
        let lb = Layout::new(sb, &out_shape);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        let data = kernels::binary_map(da, &la, db, &lb, n, f);
        Tensor::new(out_shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.broadcast_binary(a, b, OpKind::Add, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.broadcast_binary(a, b, OpKind::Sub, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.broadcast_binary(a, b, OpKind::Mul, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::ScalarMul(a, s), rg)
    }

    // --- matmul -----------------------------------------------------------

    /// Batched matrix product over the last two axes with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(self.shape_err(OpKind::MatMul, a, b));
        }
        let plan = MatMulPlan::new(&sa, &sb).ok_or_else(|| self.shape_err(OpKind::MatMul, a, b))?;
        let mut out = vec![S::zero(); plan.out_shape.iter().product()];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            let (m, k, n) = (plan.m, plan.k, plan.n);
            for bi in 0..plan.batches {
                let (ao, bo) = plan.offsets(bi);
                kernels::gemm_nn(
                    &da[ao..ao + m * k],
                    &db[bo..bo + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let v = Tensor::new(plan.out_shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    // --- structural -------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Self::invalid(OpKind::Concat, "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Self::invalid(OpKind::Concat, format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(self.shape_err(OpKind::Concat, first, p));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let w = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let v = Tensor::new(out_shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Self::invalid(OpKind::Concat, "no inputs"))?;
        let axis = self.shape(first).len().saturating_sub(1);
        self.concat(parts, axis)
    }

    /// Elements `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Self::invalid(
                OpKind::Slice,
                format!("range {start}..{end} on axis {axis} of {s:?}"),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let (dim, w) = (s[axis], end - start);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = s;
        out_shape[axis] = w;
        let v = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self
            .value(x)
            .clone()
            .reshaped(shape.to_vec())
            .map_err(|_| TensorError::Shape {
                op: OpKind::Reshape,
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            })?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    // --- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: S = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: S = t.data().iter().copied().sum::<S>() / S::of(t.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    fn reduce_axis(&self, x: Var, axis: usize, kind: OpKind) -> Result<Tensor<S>> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Self::invalid(kind, format!("axis {axis} out of range for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let dim = s[axis];
        let src = self.value(x).data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (a, &b) in dst.iter_mut().zip(row) {
                    *a += b;
                }
            }
        }
        if kind == OpKind::MeanAxis {
            let inv = S::one() / S::of(dim as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut out_shape = s;
        out_shape.remove(axis);
        Tensor::new(out_shape, out)
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.reduce_axis(x, axis, OpKind::SumAxis)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.reduce_axis(x, axis, OpKind::MeanAxis)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::MeanAxis { x, axis }, rg))
    }

    // --- unary ------------------------------------------------------------

    fn unary(&mut self, x: Var, u: Unary) -> Var {
        let f: fn(S) -> S = match u {
            Unary::Relu => |v| if v > S::zero() { v } else { S::zero() },
            Unary::Gelu => gelu,
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => |v| v.tanh(),
            Unary::Exp => |v| v.exp(),
            Unary::Log => |v| v.max(S::of(LOG_FLOOR)).ln(),
            Unary::Cos => |v| v.cos(),
            Unary::Square => |v| v * v,
        };
        let v = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(v, Op::Unary(x, u), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    /// Natural log of `max(x, 1e-12)`.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }
    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Cos)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// Normalises the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let width = *s
            .last()
            .ok_or_else(|| Self::invalid(OpKind::LayerNorm, "scalar input"))?;
        let src = self.value(x).data();
        let rows = src.len() / width;
        let mut out = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(rows);
        let wn = S::of(width as f64);
        let eps = S::of(LAYER_NORM_EPS);
        for r in 0..rows {
            let row = &src[r * width..(r + 1) * width];
            let mu = row.iter().copied().sum::<S>() / wn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / wn;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|&v| (v - mu) * is));
        }
        let v = Tensor::new(s, out)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::LayerNorm { x, inv_std }, rg))
    }

    /// Inverted dropout; the identity on an eval tape or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Self::invalid(OpKind::Dropout, format!("p = {p} outside [0, 1)")));
        }
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let keep = S::of(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<S> = (0..n)
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let v = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Dropout { x, mask }, rg))
    }

    // --- losses -----------------------------------------------------------

    /// Mean squared error between two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(OpKind::Mse, a, b));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n = S::of(da.len() as f64);
        let s = da
            .iter()
            .zip(db)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<S>()
            / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg))
    }

    /// Mean binary cross-entropy on logits, in log-sum-exp form. `labels` is
    /// treated as a constant.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Var) -> Result<Var> {
        if self.shape(logits) != self.shape(labels) {
            return Err(self.shape_err(OpKind::BceWithLogits, logits, labels));
        }
        let (z, y) = (self.value(logits).data(), self.value(labels).data());
        let n = S::of(z.len() as f64);
        let s = z
            .iter()
            .zip(y)
            .map(|(&z, &y)| bce_term(z, y))
            .sum::<S>()
            / n;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(s), Op::Bce { logits, labels }, rg))
    }

    // --- reverse pass -----------------------------------------------------

    /// Reverse pass from a scalar `loss`. The tape is consumed.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut kept = HashMap::new();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients {
                grads: kept,
                bindings: self.bindings.clone(),
            });
        }
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param => {
                    kept.insert(i, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                op => self.backprop_op(op, &node.value, &g, &mut grads),
            }
        }
        Ok(Gradients {
            grads: kept,
            bindings: self.bindings.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<S>>], v: Var, f: impl FnOnce(&mut [S])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); len]);
        f(slot);
    }

    fn backprop_op(&self, op: &Op<S>, out: &Tensor<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let out_shape = out.shape();
        match *op {
            Op::Leaf | Op::Param => unreachable!(),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -S::one() } else { S::one() };
                let la = Layout::new(self.shape(a), out_shape);
                self.acc(grads, a, |acc| kernels::reduce_into(g, &la, acc));
                let lb = Layout::new(self.shape(b), out_shape);
                self.acc(grads, b, |acc| {
                    if sign == S::one() {
                        kernels::reduce_into(g, &lb, acc);
                    } else {
                        let neg: Vec<S> = g.iter().map(|&x| -x).collect();
                        kernels::reduce_into(&neg, &lb, acc);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let la = Layout::new(sa, out_shape);
                let lb = Layout::new(sb, out_shape);
                let (da, db) = (self.value(a).data(), self.value(b).data());
                self.acc(grads, a, |acc| {
                    let t: Vec<S> = g.iter().enumerate().map(|(i, &x)| x * db[lb.at(i)]).collect();
                    kernels::reduce_into(&t, &la, acc);
                });
                self.acc(grads, b, |acc| {
                    let t: Vec<S> = g.iter().enumerate().map(|(i, &x)| x * da[la.at(i)]).collect();
                    kernels::reduce_into(&t, &lb, acc);
                });
            }
            Op::ScalarMul(a, s) => self.acc(grads, a, |acc| {
                for (x, &y) in acc.iter_mut().zip(g) {
                    *x += y * s;
                }
            }),
            Op::MatMul(a, b) => {
                let plan = MatMulPlan::new(self.shape(a), self.shape(b)).expect("checked in forward");
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let (da, db) = (self.value(a).data(), self.value(b).data());
                self.acc(grads, a, |acc| {
                    for bi in 0..plan.batches {
                        let (ao, bo) = plan.offsets(bi);
                        kernels::gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &db[bo..bo + k * n],
                            &mut acc[ao..ao + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.acc(grads, b, |acc| {
                    for bi in 0..plan.batches {
                        let (ao, bo) = plan.offsets(bi);
                        kernels::gemm_tn(
                            &da[ao..ao + m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut acc[bo..bo + k * n],
                            k,
                            m,
                            n,
                        );
                    }
                });
            }
            Op::Concat { ref parts, axis } => {
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[axis];
                    self.acc(grads, p, |acc| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + w) * inner];
                            for (x, &y) in acc[o * w * inner..(o + 1) * w * inner].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(x);
                let outer: usize = s[..axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let (dim, w) = (s[axis], out_shape[axis]);
                self.acc(grads, x, |acc| {
                    for o in 0..outer {
                        let dst = &mut acc[(o * dim + start) * inner..(o * dim + start + w) * inner];
                        for (a, &b) in dst.iter_mut().zip(&g[o * w * inner..(o + 1) * w * inner]) {
                            *a += b;
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, x, |acc| {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }),
            Op::Sum(x) | Op::Mean(x) => {
                let scale = if matches!(op, Op::Mean(_)) {
                    S::one() / S::of(self.value(x).len() as f64)
                } else {
                    S::one()
                };
                let gv = g[0] * scale;
                self.acc(grads, x, |acc| acc.iter_mut().for_each(|a| *a += gv));
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let s = self.shape(x);
                let outer: usize = s[..axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let dim = s[axis];
                let scale = if matches!(op, Op::MeanAxis { .. }) {
                    S::one() / S::of(dim as f64)
                } else {
                    S::one()
                };
                self.acc(grads, x, |acc| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for d in 0..dim {
                            let dst = &mut acc[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                            for (a, &b) in dst.iter_mut().zip(src) {
                                *a += b * scale;
                            }
                        }
                    }
                });
            }
            Op::Unary(x, u) => {
                let xin = self.value(x).data();
                let y = out.data();
                self.acc(grads, x, |acc| {
                    for i in 0..acc.len() {
                        let d = match u {
                            Unary::Relu => {
                                if xin[i] > S::zero() {
                                    S::one()
                                } else {
                                    S::zero()
                                }
                            }
                            Unary::Gelu => gelu_grad(xin[i]),
                            Unary::Sigmoid => y[i] * (S::one() - y[i]),
                            Unary::Tanh => S::one() - y[i] * y[i],
                            Unary::Exp => y[i],
                            Unary::Log => {
                                if xin[i] > S::of(LOG_FLOOR) {
                                    S::one() / xin[i]
                                } else {
                                    S::zero()
                                }
                            }
                            Unary::Cos => -xin[i].sin(),
                            Unary::Square => S::of(2.0) * xin[i],
                        };
                        acc[i] += g[i] * d;
                    }
                });
            }
            Op::LayerNorm { x, ref inv_std } => {
                let width = *out_shape.last().unwrap();
                let y = out.data();
                let wn = S::of(width as f64);
                self.acc(grads, x, |acc| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let span = r * width..(r + 1) * width;
                        let (gr, yr) = (&g[span.clone()], &y[span.clone()]);
                        let mg = gr.iter().copied().sum::<S>() / wn;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<S>() / wn;
                        for ((a, &gi), &yi) in acc[span].iter_mut().zip(gr).zip(yr) {
                            *a += is * (gi - mg - yi * mgy);
                        }
                    }
                });
            }
            Op::Dropout { x, ref mask } => self.acc(grads, x, |acc| {
                for ((a, &b), &m) in acc.iter_mut().zip(g).zip(mask) {
                    *a += b * m;
                }
            }),
            Op::Mse(a, b) => {
                let (da, db) = (self.value(a).data(), self.value(b).data());
                let c = S::of(2.0) * g[0] / S::of(da.len() as f64);
                self.acc(grads, a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += c * (da[i] - db[i]);
                    }
                });
                self.acc(grads, b, |acc| {
                    for i in 0..acc.len() {
                        acc[i] -= c * (da[i] - db[i]);
                    }
                });
            }
            Op::Bce { logits, labels } => {
                let (z, y) = (self.value(logits).data(), self.value(labels).data());
                let c = g[0] / S::of(z.len() as f64);
                self.acc(grads, logits, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += c * (sigmoid(z[i]) - y[i]);
                    }
                });
            }
        }
    }
}

struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    batches: usize,
    out_shape: Vec<usize>,
    a_batch: Option<Layout>,
    b_batch: Option<Layout>,
    a_stride: usize,
    b_stride: usize,
}

impl MatMulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Option<Self> {
        let (ra, rb) = (sa.len(), sb.len());
        let (m, k, n) = (sa[ra - 2], sa[ra - 1], sb[rb - 1]);
        if sb[rb - 2] != k {
            return None;
        }
        let (ba, bb) = (&sa[..ra - 2], &sb[..rb - 2]);
        if bb.is_empty() {
            // Fold every batch axis of `a` into its row count.
            let rows: usize = ba.iter().product::<usize>() * m;
            let mut out_shape = ba.to_vec();
            out_shape.extend([m, n]);
            return Some(Self {
                m: rows,
                k,
                n,
                batches: 1,
                out_shape,
                a_batch: None,
                b_batch: None,
                a_stride: 0,
                b_stride: 0,
            });
        }
        let batch = kernels::broadcast_shape(ba, bb)?;
        let batches = batch.iter().product();
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        Some(Self {
            m,
            k,
            n,
            batches,
            out_shape,
            a_batch: Some(Layout::new(ba, &batch)),
            b_batch: Some(Layout::new(bb, &batch)),
            a_stride: m * k,
            b_stride: k * n,
        })
    }

    fn offsets(&self, bi: usize) -> (usize, usize) {
        let ao = self.a_batch.as_ref().map_or(0, |l| l.at(bi) * self.a_stride);
        let bo = self.b_batch.as_ref().map_or(0, |l| l.at(bi) * self.b_stride);
        (ao, bo)
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `max(z, 0) - z*y + log(1 + exp(-|z|))`
#[inline]
pub(crate) fn bce_term<S: Scalar>(z: S, y: S) -> S {
    z.max(S::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<S: Scalar>(x: S) -> S {
    let inner = S::of(GELU_C) * (x + S::of(GELU_A) * x * x * x);
    S::of(0.5) * x * (S::one() + fast_tanh(inner))
}

/// `tanh` through `expm1`, accurate near zero and saturating for large `|u|`.
#[inline]
fn fast_tanh<S: Scalar>(u: S) -> S {
    let cap = S::of(20.0);
    if u > cap {
        return S::one();
    }
    if u < -cap {
        return -S::one();
    }
    let e = (u + u).exp_m1();
    e / (e + S::of(2.0))
}

#[inline]
fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let t = fast_tanh(c * (x + a * x * x * x));
    let half = S::of(0.5);
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_two_by_two() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn sigmoid_and_mean() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).item(), 0.5);
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let m = tape.mean(x);
        assert_eq!(tape.value(m).item(), 2.0);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.square(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let m = tape.mean(x);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn bce_gradient_at_zero_logit() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[1], &[0.0]));
        let y = tape.constant(t(&[1], &[1.0]));
        let l = tape.bce_with_logits(z, y).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(z).unwrap().item(), -0.5);
    }

    #[test]
    fn bce_is_finite_when_saturated() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[2], &[800.0, -800.0]));
        let y = tape.constant(t(&[2], &[0.0, 1.0]));
        let l = tape.bce_with_logits(z, y).unwrap();
        assert!((tape.value(l).item() - 800.0).abs() < 1e-9);
        assert!(tape.fault().is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s).err(), Some(TensorError::TapeConsumed));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        match tape.matmul(a, b) {
            Err(TensorError::Shape { op, lhs, rhs }) => {
                assert_eq!(op, OpKind::MatMul);
                assert_eq!((lhs, rhs), (vec![2, 3], vec![2, 3]));
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = tape.constant(Tensor::zeros([2]));
        let err = tape.add(a, c).unwrap_err();
        assert!(err.to_string().starts_with("add:"));
    }

    #[test]
    fn log_is_clamped_and_flags_nothing() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[0.0, -1.0]));
        let y = tape.log(x);
        assert!(tape.value(y).data().iter().all(|v| (*v - LOG_FLOOR.ln()).abs() < 1e-9));
        assert!(tape.fault().is_none());
    }

    #[test]
    fn non_finite_sets_fault() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[1000.0]));
        let y = tape.exp(x);
        assert_eq!(
            tape.fault(),
            Some(TensorError::NonFinite {
                op: OpKind::Exp,
                node: y.index()
            })
        );
    }

    #[test]
    fn eval_dropout_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f64>::eval();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.dropout(x, 0.5, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn train_dropout_preserves_expectation() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([20_000], 1.0));
        let y = tape.dropout(x, 0.3, &mut rng).unwrap();
        let m = tape.value(y).data().iter().sum::<f64>() / 20_000.0;
        assert!((m - 1.0).abs() < 0.03, "{m}");
    }

    #[test]
    fn batched_matmul_broadcasts_weight() {
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(t(&[1, 2], &[1.0, -1.0]));
        let x = tape.constant(t(&[2, 2, 1], &[1.0, 2.0, 5.0, 3.0]));
        let y = tape.matmul(w, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 1, 1]);
        assert_eq!(tape.value(y).data(), &[-1.0, 2.0]);
    }
}
