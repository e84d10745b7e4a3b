//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value. Because nodes
//! are only ever appended, node order is a topological order, and the
//! backward sweep is a single reverse pass that visits each node once.
//! Gradients flowing into a node from several consumers are summed.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{
    axis_extents, gemm_a_bt_acc, gemm_acc, gemm_at_b_acc, sigmoid, softmax_rows, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    /// Softmax over the last axis.
    Softmax,
    Linear,
}

/// A multi-input operation with a hand-written vector-Jacobian product.
///
/// Used for kernels where recording every scalar step would make the tape
/// impractically long (the recurrent sweep over thousands of time steps).
pub trait FusedOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input (same length as that input), or
    /// `None` for inputs that receive no gradient.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Act(Var, Activation),
    Mean { x: Var, axis: usize },
    Broadcast { x: Var, axis: usize },
    Reshape(Var),
    Reverse { x: Var, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Stack { xs: Vec<Var>, axis: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Sum(Var),
    CrossEntropy { probs: Var, targets: Vec<usize> },
    Fused { inputs: Vec<Var>, op: Box<dyn FusedOp> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Act(..) => "activation",
            Op::Mean { .. } => "mean",
            Op::Broadcast { .. } => "broadcast",
            Op::Reshape(_) => "reshape",
            Op::Reverse { .. } => "reverse",
            Op::Slice { .. } => "slice",
            Op::Stack { .. } => "stack",
            Op::Concat { .. } => "concat",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Fused { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Act(x, _)
            | Op::Mean { x, .. }
            | Op::Broadcast { x, .. }
            | Op::Reshape(x)
            | Op::Reverse { x, .. }
            | Op::Slice { x, .. }
            | Op::Sum(x) => vec![*x],
            Op::CrossEntropy { probs, .. } => vec![*probs],
            Op::Stack { xs, .. } | Op::Concat { xs, .. } => xs.clone(),
            Op::Fused { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated.
///
/// One tape belongs to one forward/backward pass; build a fresh tape per
/// training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(
                self.nodes
                    .iter()
                    .enumerate()
                    .map(|(i, n)| (i, n.op.name(), n.value.shape().to_vec())),
            )
            .finish()
    }
}

/// Gradients of a scalar with respect to every parameter on the tape.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, param: Var) -> Option<&Tensor> {
        self.by_param.get(&param)
    }

    pub fn take(&mut self, param: Var) -> Option<Tensor> {
        self.by_param.remove(&param)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.by_param.iter().map(|(v, t)| (*v, t))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation names, inputs and output node of every record, in order.
    pub fn records(&self) -> Vec<(&'static str, Vec<Var>, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.op.name(), n.op.inputs(), Var(i)))
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Constant, false)
    }

    /// A trainable leaf; [`Tape::backward`] reports a gradient for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Param, true)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err(format!("matmul of {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn check_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "element-wise product")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let src = self.value(x);
        let mut data = src.data().to_vec();
        match kind {
            Activation::Sigmoid => data.iter_mut().for_each(|v| *v = sigmoid(*v)),
            Activation::Tanh => data.iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Softmax => {
                let cols = src.shape().last().copied().unwrap_or(1);
                softmax_rows(&mut data, cols);
            }
            Activation::Linear => {}
        }
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Act(x, kind))
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, dim, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in dst.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            let scale = 1.0 / dim as f64;
            dst.iter_mut().for_each(|v| *v *= scale);
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::Mean { x, axis }))
    }

    /// Inserts a new axis at position `axis` holding `copies` replicas of `x`.
    pub fn broadcast_over_axis(&mut self, x: Var, axis: usize, copies: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis > shape.len() {
            return Err(Error::Index {
                axis,
                rank: shape.len(),
            });
        }
        if copies == 0 {
            return Err(Error::Contract("broadcast needs at least one copy".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * copies * inner);
        for o in 0..outer {
            let block = &src[o * inner..(o + 1) * inner];
            for _ in 0..copies {
                out.extend_from_slice(block);
            }
        }
        let mut new_shape = shape;
        new_shape.insert(axis, copies);
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::Broadcast { x, axis }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Reverses element order along `axis`.
    pub fn reverse_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, dim, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for d in 0..dim {
                let from = (o * dim + (dim - 1 - d)) * inner;
                let to = (o * dim + d) * inner;
                out[to..to + inner].copy_from_slice(&src[from..from + inner]);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Reverse { x, axis }))
    }

    /// Takes `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(dim_err(format!(
                "slice [{start}, {}) along axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, dim, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * dim + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }))
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let shape = self.shape(*first).to_vec();
        if axis > shape.len() {
            return Err(Error::Index {
                axis,
                rank: shape.len(),
            });
        }
        for v in xs {
            if self.shape(*v) != shape.as_slice() {
                return Err(dim_err(format!(
                    "stack of {shape:?} with {:?}",
                    self.shape(*v)
                )));
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * xs.len() * inner);
        for o in 0..outer {
            for v in xs {
                out.extend_from_slice(&self.value(*v).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut new_shape = shape;
        new_shape.insert(axis, xs.len());
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(
            value,
            Op::Stack {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// Joins tensors along an existing axis; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let shape = self.shape(*first).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                axis,
                rank: shape.len(),
            });
        }
        let mut total = 0;
        for v in xs {
            let s = self.shape(*v);
            let compatible = s.len() == shape.len()
                && s.iter()
                    .zip(&shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err(format!("concat of {shape:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in xs {
                let d = self.shape(*v)[axis];
                out.extend_from_slice(&self.value(*v).data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut new_shape = shape;
        new_shape[axis] = total;
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Mean negative log-probability of the target class for each row of
    /// `probs`, with probabilities clamped below at [`PROB_FLOOR`].
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(probs);
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(dim_err(format!(
                "cross entropy of {shape:?} against {} targets",
                targets.len()
            )));
        }
        let cols = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Contract(format!(
                "target class {bad} out of range for {cols} classes"
            )));
        }
        let p = self.value(probs).data();
        let n = targets.len() as f64;
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -p[r * cols + t].max(PROB_FLOOR).ln())
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Records a fused operation whose forward value was computed by the caller.
    pub fn fused(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn FusedOp>) -> Var {
        self.push(
            value,
            Op::Fused {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Gradient of the scalar `loss` with respect to every parameter on the
    /// tape. Parameters that `loss` does not depend on get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut by_param = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].take() else {
                if matches!(node.op, Op::Param) {
                    by_param.insert(Var(i), Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if matches!(node.op, Op::Param) {
                by_param.insert(Var(i), Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if matches!(node.op, Op::Param) {
                by_param.insert(Var(i), Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { by_param })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.needs(*a) {
                    let da = slot(grads, *a, va.len());
                    gemm_a_bt_acc(g, vb.data(), da, m, n, k);
                }
                if self.needs(*b) {
                    let db = slot(grads, *b, vb.len());
                    gemm_at_b_acc(va.data(), g, db, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da = slot(grads, *a, g.len());
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(vb.data()) {
                        *d += gi * bi;
                    }
                }
                if self.needs(*b) {
                    let db = slot(grads, *b, g.len());
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(va.data()) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Act(x, kind) => {
                if !self.needs(*x) {
                    return;
                }
                let y = node.value.data();
                let dx = slot(grads, *x, g.len());
                match kind {
                    Activation::Sigmoid => {
                        for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                            *d += gi * yi * (1.0 - yi);
                        }
                    }
                    Activation::Tanh => {
                        for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                            *d += gi * (1.0 - yi * yi);
                        }
                    }
                    Activation::Softmax => {
                        let cols = node.value.shape().last().copied().unwrap_or(1);
                        for ((drow, grow), yrow) in dx
                            .chunks_mut(cols)
                            .zip(g.chunks(cols))
                            .zip(y.chunks(cols))
                        {
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += yi * (gi - dot);
                            }
                        }
                    }
                    Activation::Linear => add_into(dx, g),
                }
            }
            Op::Mean { x, axis } => {
                if !self.needs(*x) {
                    return;
                }
                let src = self.value(*x);
                let (outer, dim, inner) = axis_extents(src.shape(), *axis);
                let scale = 1.0 / dim as f64;
                let dx = slot(grads, *x, src.len());
                for o in 0..outer {
                    let gr = &g[o * inner..(o + 1) * inner];
                    for d in 0..dim {
                        let row = &mut dx[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                        for (r, gi) in row.iter_mut().zip(gr) {
                            *r += gi * scale;
                        }
                    }
                }
            }
            Op::Broadcast { x, axis } => {
                if !self.needs(*x) {
                    return;
                }
                let (outer, copies, inner) = axis_extents(node.value.shape(), *axis);
                let dx = slot(grads, *x, outer * inner);
                for o in 0..outer {
                    let dst = &mut dx[o * inner..(o + 1) * inner];
                    for c in 0..copies {
                        let from = (o * copies + c) * inner;
                        add_into(dst, &g[from..from + inner]);
                    }
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
            }
            Op::Reverse { x, axis } => {
                if !self.needs(*x) {
                    return;
                }
                let (outer, dim, inner) = axis_extents(node.value.shape(), *axis);
                let dx = slot(grads, *x, g.len());
                for o in 0..outer {
                    for d in 0..dim {
                        let to = (o * dim + (dim - 1 - d)) * inner;
                        let from = (o * dim + d) * inner;
                        add_into(&mut dx[to..to + inner], &g[from..from + inner]);
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                if !self.needs(*x) {
                    return;
                }
                let src = self.value(*x);
                let (outer, dim, inner) = axis_extents(src.shape(), *axis);
                let len = node.value.shape()[*axis];
                let dx = slot(grads, *x, src.len());
                for o in 0..outer {
                    let to = (o * dim + start) * inner;
                    let from = o * len * inner;
                    add_into(&mut dx[to..to + len * inner], &g[from..from + len * inner]);
                }
            }
            Op::Stack { xs, axis } => {
                let (outer, count, inner) = axis_extents(node.value.shape(), *axis);
                for (k, v) in xs.iter().enumerate() {
                    if !self.needs(*v) {
                        continue;
                    }
                    let dx = slot(grads, *v, outer * inner);
                    for o in 0..outer {
                        let from = (o * count + k) * inner;
                        add_into(&mut dx[o * inner..(o + 1) * inner], &g[from..from + inner]);
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                for v in xs {
                    let d = self.shape(*v)[*axis];
                    if self.needs(*v) {
                        let dx = slot(grads, *v, outer * d * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            add_into(
                                &mut dx[o * d * inner..(o + 1) * d * inner],
                                &g[from..from + d * inner],
                            );
                        }
                    }
                    offset += d;
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let dx = slot(grads, *x, self.value(*x).len());
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::CrossEntropy { probs, targets } => {
                if !self.needs(*probs) {
                    return;
                }
                let p = self.value(*probs);
                let cols = p.shape()[1];
                let n = targets.len() as f64;
                let dp = slot(grads, *probs, p.len());
                for (r, &t) in targets.iter().enumerate() {
                    let pt = p.data()[r * cols + t];
                    if pt > PROB_FLOOR {
                        dp[r * cols + t] -= g[0] / (n * pt);
                    }
                }
            }
            Op::Fused { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.needs(*v)).collect();
                let input_grads = op.backward(&values, &node.value, g, &needs);
                for ((v, grad), need) in inputs.iter().zip(input_grads).zip(needs) {
                    if let (Some(grad), true) = (grad, need) {
                        add_into(slot(grads, *v, grad.len()), &grad);
                    }
                }
            }
        }
    }
}

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
