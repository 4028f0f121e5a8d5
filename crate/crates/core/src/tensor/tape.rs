//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and the inputs it was
//! computed from. Because nodes are only ever appended, the tape is in
//! topological order and `backward` is a single reverse sweep.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{gelu, gelu_grad, MatmulPlan};
use super::shape::{binary_map, broadcast_shape, expand, reduce_to, split_axis};
use super::{Tensor, TensorError};
use crate::spectral::kernel as dft;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sin,
    Cos,
    Square,
    Exp,
    Tanh,
    Gelu,
    Ln,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryOp, NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Unary(UnaryOp, NodeId),
    MatMul(NodeId, NodeId, MatmulPlan),
    Sum(NodeId, Option<usize>),
    Mean(NodeId, Option<usize>),
    Max { x: NodeId, argmax: Vec<usize> },
    Softmax(NodeId, usize),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Narrow { x: NodeId, axis: usize, start: usize },
    Select { x: NodeId, axis: usize, index: Vec<usize> },
    Concat(Vec<NodeId>, usize),
    DftRe(NodeId, usize),
    DftIm(NodeId, usize),
    Idft { re: NodeId, im: NodeId, axis: usize, n: usize },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
///
/// A tape is single-threaded. Independent tapes can live on different
/// threads because the values they hold are plain data.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    /// Accumulated gradients of leaf nodes, indexed by node id.
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf that participates in gradient computation.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from gradient computation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Accumulated gradient of a leaf, if it received one.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(v.id)?.as_ref()?;
        let shape = self.nodes.borrow()[v.id].value.shape().to_vec();
        Some(Tensor::new(&shape, g.clone()).expect("gradient shape"))
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().iter_mut().for_each(|g| *g = None);
    }

    /// Propagates d(loss)/d(node) to every leaf that requires a gradient.
    ///
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<(), TensorError> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        local[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = local[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                local[id] = Some(g);
                continue;
            }
            for (input, contribution) in backward_rule(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut local[input] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        let mut grads = self.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize(nodes.len(), None);
        }
        for (id, g) in local.into_iter().enumerate() {
            let Some(g) = g else { continue };
            match &mut grads[id] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn backward_rule(nodes: &[Node], node: &Node, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
    let val = |id: NodeId| -> &Tensor { &nodes[id].value };
    let out = &node.value;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Binary(op, a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let shape = out.shape();
            match op {
                BinaryOp::Add => vec![
                    (*a, reduce_to(g, shape, ta.shape())),
                    (*b, reduce_to(g, shape, tb.shape())),
                ],
                BinaryOp::Sub => {
                    let gb: Vec<f64> = reduce_to(g, shape, tb.shape()).iter().map(|x| -x).collect();
                    vec![(*a, reduce_to(g, shape, ta.shape())), (*b, gb)]
                }
                BinaryOp::Mul => {
                    let ea = expand(ta, shape);
                    let eb = expand(tb, shape);
                    let ga: Vec<f64> = g.iter().zip(&eb).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> = g.iter().zip(&ea).map(|(g, x)| g * x).collect();
                    vec![
                        (*a, reduce_to(&ga, shape, ta.shape())),
                        (*b, reduce_to(&gb, shape, tb.shape())),
                    ]
                }
            }
        }
        Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
        Op::AddScalar(x) => vec![(*x, g.to_vec())],
        Op::Unary(op, x) => {
            let xs = val(*x).data();
            let ys = out.data();
            let gx = match op {
                UnaryOp::Sin => zip3(g, xs, ys, |g, x, _| g * x.cos()),
                UnaryOp::Cos => zip3(g, xs, ys, |g, x, _| -g * x.sin()),
                UnaryOp::Square => zip3(g, xs, ys, |g, x, _| 2.0 * g * x),
                UnaryOp::Exp => zip3(g, xs, ys, |g, _, y| g * y),
                UnaryOp::Tanh => zip3(g, xs, ys, |g, _, y| g * (1.0 - y * y)),
                UnaryOp::Gelu => zip3(g, xs, ys, |g, x, _| g * gelu_grad(x)),
                UnaryOp::Ln => zip3(g, xs, ys, |g, x, _| g / x),
            };
            vec![(*x, gx)]
        }
        Op::MatMul(a, b, plan) => {
            let (ta, tb) = (val(*a), val(*b));
            let mut res = Vec::with_capacity(2);
            if nodes[*a].requires_grad {
                res.push((*a, plan.grad_a(g, tb.data(), ta.numel())));
            }
            if nodes[*b].requires_grad {
                res.push((*b, plan.grad_b(g, ta.data(), tb.numel())));
            }
            res
        }
        Op::Sum(x, axis) | Op::Mean(x, axis) => {
            let tx = val(*x);
            let scale = match (&node.op, axis) {
                (Op::Sum(..), _) => 1.0,
                (_, None) => 1.0 / tx.numel() as f64,
                (_, Some(ax)) => 1.0 / tx.shape()[*ax] as f64,
            };
            let gx = match axis {
                None => vec![g[0] * scale; tx.numel()],
                Some(ax) => {
                    let (outer, n, inner) = split_axis(tx.shape(), *ax);
                    let mut gx = vec![0.0; tx.numel()];
                    for o in 0..outer {
                        for k in 0..n {
                            let dst = &mut gx[(o * n + k) * inner..(o * n + k + 1) * inner];
                            let src = &g[o * inner..(o + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d = s * scale);
                        }
                    }
                    gx
                }
            };
            vec![(*x, gx)]
        }
        Op::Max { x, argmax, .. } => {
            let mut gx = vec![0.0; val(*x).numel()];
            for (gi, &src) in g.iter().zip(argmax) {
                gx[src] += gi;
            }
            vec![(*x, gx)]
        }
        Op::Softmax(x, axis) => {
            let y = out.data();
            let (outer, n, inner) = split_axis(out.shape(), *axis);
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                    for k in 0..n {
                        gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![(*x, gx)]
        }
        Op::Reshape(x) => vec![(*x, g.to_vec())],
        Op::Permute(x, perm) => {
            let tx = val(*x);
            let mut gx = vec![0.0; tx.numel()];
            permute_visit(tx.shape(), perm, |dst, src| gx[src] = g[dst]);
            vec![(*x, gx)]
        }
        Op::Narrow { x, axis, start } => {
            let tx = val(*x);
            let (outer, n, inner) = split_axis(tx.shape(), *axis);
            let len = out.shape()[*axis];
            let mut gx = vec![0.0; tx.numel()];
            for o in 0..outer {
                let src = &g[o * len * inner..(o + 1) * len * inner];
                let dst = &mut gx[(o * n + start) * inner..(o * n + start + len) * inner];
                dst.copy_from_slice(src);
            }
            vec![(*x, gx)]
        }
        Op::Select { x, axis, index } => {
            let tx = val(*x);
            let (outer, n, inner) = split_axis(tx.shape(), *axis);
            let len = index.len();
            let mut gx = vec![0.0; tx.numel()];
            for o in 0..outer {
                for (k, &src) in index.iter().enumerate() {
                    for i in 0..inner {
                        gx[(o * n + src) * inner + i] += g[(o * len + k) * inner + i];
                    }
                }
            }
            vec![(*x, gx)]
        }
        Op::Concat(xs, axis) => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            let mut res = Vec::with_capacity(xs.len());
            for &x in xs {
                let len = val(x).shape()[*axis];
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                    gx[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
                }
                offset += len;
                res.push((x, gx));
            }
            res
        }
        Op::DftRe(x, axis) | Op::DftIm(x, axis) => {
            let tx = val(*x);
            let (outer, n, inner) = split_axis(tx.shape(), *axis);
            let bins = out.shape()[*axis];
            let part = match node.op {
                Op::DftRe(..) => dft::Part::Re,
                _ => dft::Part::Im,
            };
            vec![(*x, dft::forward_adjoint(g, part, outer, n, bins, inner))]
        }
        Op::Idft { re, im, axis, n } => {
            let bins = val(*re).shape()[*axis];
            let (outer, _, inner) = split_axis(out.shape(), *axis);
            let (gre, gim) = dft::inverse_adjoint(g, outer, *n, bins, inner);
            vec![(*re, gre), (*im, gim)]
        }
    }
}

fn zip3(g: &[f64], x: &[f64], y: &[f64], f: impl Fn(f64, f64, f64) -> f64) -> Vec<f64> {
    g.iter()
        .zip(x)
        .zip(y)
        .map(|((&g, &x), &y)| f(g, x, y))
        .collect()
}

/// Calls `f(dst_flat, src_flat)` for every element of `src.permute(perm)`.
fn permute_visit(src_shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = src_shape.len();
    let mut src_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        src_strides[d] = src_strides[d + 1] * src_shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let total: usize = out_shape.iter().product();
    let mut idx = vec![0; rank];
    let mut off = 0;
    for flat in 0..total {
        f(flat, off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(), TensorError> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[NodeId]) -> Var<'t> {
        let rg = self.tape.requires(inputs);
        self.tape.push(value, op, rg)
    }

    pub fn binary(self, op: BinaryOp, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (a, b) = (self.value(), rhs.value());
        let value = match op {
            BinaryOp::Add => binary_map("add", &a, &b, |x, y| x + y)?,
            BinaryOp::Sub => binary_map("sub", &a, &b, |x, y| x - y)?,
            BinaryOp::Mul => binary_map("mul", &a, &b, |x, y| x * y)?,
        };
        Ok(self.record(value, Op::Binary(op, self.id, rhs.id), &[self.id, rhs.id]))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(BinaryOp::Add, rhs)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(BinaryOp::Sub, rhs)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(BinaryOp::Mul, rhs)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = self.value().map(|x| x * c);
        self.record(value, Op::Scale(self.id, c), &[self.id])
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let value = self.value().map(|x| x + c);
        self.record(value, Op::AddScalar(self.id), &[self.id])
    }

    pub fn unary(self, op: UnaryOp) -> Var<'t> {
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Sin => f64::sin,
            UnaryOp::Cos => f64::cos,
            UnaryOp::Square => |x| x * x,
            UnaryOp::Exp => f64::exp,
            UnaryOp::Tanh => f64::tanh,
            UnaryOp::Gelu => gelu,
            UnaryOp::Ln => f64::ln,
        };
        let value = self.value().map(f);
        self.record(value, Op::Unary(op, self.id), &[self.id])
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(UnaryOp::Sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(UnaryOp::Cos)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(UnaryOp::Square)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(UnaryOp::Exp)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(UnaryOp::Tanh)
    }

    pub fn gelu(self) -> Var<'t> {
        self.unary(UnaryOp::Gelu)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(UnaryOp::Ln)
    }

    /// Batched matrix product over the last two axes.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (a, b) = (self.value(), rhs.value());
        let plan = MatmulPlan::new(a.shape(), b.shape())?;
        let data = plan.forward(a.data(), b.data());
        let value = Tensor::new(&plan.out_shape, data)?;
        Ok(self.record(value, Op::MatMul(self.id, rhs.id, plan), &[self.id, rhs.id]))
    }

    /// Reduction along `axis` (removing it), or over everything when `None`.
    pub fn reduce(self, op: ReduceOp, axis: Option<usize>) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        let name = match op {
            ReduceOp::Sum => "sum",
            ReduceOp::Mean => "mean",
            ReduceOp::Max => "max",
        };
        if let Some(ax) = axis {
            check_axis(name, x.shape(), ax)?;
        }
        let (outer, n, inner, out_shape) = match axis {
            None => (1, x.numel(), 1, Vec::new()),
            Some(ax) => {
                let (o, n, i) = split_axis(x.shape(), ax);
                let mut s = x.shape().to_vec();
                s.remove(ax);
                (o, n, i, s)
            }
        };
        if n == 0 && op != ReduceOp::Sum {
            return Err(TensorError::Contract(format!("{name} over an empty axis")));
        }
        let xs = x.data();
        let mut data = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                for o in 0..outer {
                    for k in 0..n {
                        let row = &xs[(o * n + k) * inner..(o * n + k + 1) * inner];
                        data[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(d, v)| *d += v);
                    }
                }
                if op == ReduceOp::Mean {
                    data.iter_mut().for_each(|d| *d /= n as f64);
                }
            }
            ReduceOp::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = (o * n) * inner + i;
                        for k in 1..n {
                            let at = (o * n + k) * inner + i;
                            // Strict comparison keeps the first index on ties.
                            if xs[at] > xs[best] {
                                best = at;
                            }
                        }
                        data[o * inner + i] = xs[best];
                        argmax[o * inner + i] = best;
                    }
                }
            }
        }
        let value = Tensor::new(&out_shape, data)?;
        let op = match op {
            ReduceOp::Sum => Op::Sum(self.id, axis),
            ReduceOp::Mean => Op::Mean(self.id, axis),
            ReduceOp::Max => Op::Max { x: self.id, argmax },
        };
        Ok(self.record(value, op, &[self.id]))
    }

    pub fn sum(self, axis: Option<usize>) -> Result<Var<'t>, TensorError> {
        self.reduce(ReduceOp::Sum, axis)
    }

    pub fn mean(self, axis: Option<usize>) -> Result<Var<'t>, TensorError> {
        self.reduce(ReduceOp::Mean, axis)
    }

    pub fn max(self, axis: Option<usize>) -> Result<Var<'t>, TensorError> {
        self.reduce(ReduceOp::Max, axis)
    }

    pub fn sum_all(self) -> Var<'t> {
        self.sum(None).expect("full reduction")
    }

    pub fn mean_all(self) -> Var<'t> {
        self.mean(None).expect("full reduction")
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        check_axis("softmax", x.shape(), axis)?;
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::Numeric("softmax input contains NaN".into()));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let xs = x.data();
        let mut y = vec![0.0; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| xs[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (xs[at(k)] - m).exp();
                    y[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    y[at(k)] /= z;
                }
            }
        }
        let value = Tensor::new(x.shape(), y)?;
        Ok(self.record(value, Op::Softmax(self.id, axis), &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        let value = (*self.value()).clone().reshape(shape)?;
        Ok(self.record(value, Op::Reshape(self.id), &[self.id]))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        let valid = perm.len() == rank
            && perm.iter().all(|&p| p < rank && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::Dimension {
                op: "permute",
                lhs: x.shape().to_vec(),
                rhs: perm.to_vec(),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
        let mut data = vec![0.0; x.numel()];
        permute_visit(x.shape(), perm, |dst, src| data[dst] = x.data()[src]);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.record(value, Op::Permute(self.id, perm.to_vec()), &[self.id]))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>, TensorError> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(TensorError::InvalidAxis {
                op: "transpose",
                axis: 1,
                shape: self.shape(),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// Elements `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        check_axis("narrow", x.shape(), axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        if start + len > n {
            return Err(TensorError::Contract(format!(
                "narrow [{start}, {}) exceeds axis {axis} of shape {:?}",
                start + len,
                x.shape()
            )));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, data)?;
        Ok(self.record(value, Op::Narrow { x: self.id, axis, start }, &[self.id]))
    }

    /// Gathers `index` entries along `axis`.
    pub fn select(self, axis: usize, index: &[usize]) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        check_axis("select", x.shape(), axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(TensorError::Contract(format!(
                "select index {bad} out of range for axis {axis} of shape {:?}",
                x.shape()
            )));
        }
        let mut data = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &k in index {
                data.extend_from_slice(&x.data()[(o * n + k) * inner..(o * n + k + 1) * inner]);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = index.len();
        let value = Tensor::new(&shape, data)?;
        let op = Op::Select {
            x: self.id,
            axis,
            index: index.to_vec(),
        };
        Ok(self.record(value, op, &[self.id]))
    }

    /// Joins tensors that agree on every axis except `axis`.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        check_axis("concat", &shapes[0], axis)?;
        for s in &shapes[1..] {
            let compatible = s.len() == shapes[0].len()
                && s.iter()
                    .zip(&shapes[0])
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::Dimension {
                    op: "concat",
                    lhs: shapes[0].clone(),
                    rhs: s.clone(),
                });
            }
        }
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let (outer, _, inner) = split_axis(&shapes[0], axis);
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, s) in values.iter().zip(&shapes) {
                let len = s[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = shapes[0].clone();
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        Ok(first.record(value, Op::Concat(ids.clone(), axis), &ids))
    }

    /// Real-input DFT along `axis`, keeping the `n/2 + 1` non-redundant
    /// bins. Un-normalized. Returns `(re, im)`.
    pub fn rdft(self, axis: usize) -> Result<(Var<'t>, Var<'t>), TensorError> {
        let x = self.value();
        check_axis("rdft", x.shape(), axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        if n == 0 {
            return Err(TensorError::Contract("rdft of an empty axis".into()));
        }
        let bins = n / 2 + 1;
        let (re, im) = dft::forward(x.data(), outer, n, bins, inner);
        let mut shape = x.shape().to_vec();
        shape[axis] = bins;
        let re = self.record(Tensor::new(&shape, re)?, Op::DftRe(self.id, axis), &[self.id]);
        let im = self.record(Tensor::new(&shape, im)?, Op::DftIm(self.id, axis), &[self.id]);
        Ok((re, im))
    }

    /// Inverse of [`Var::rdft`] producing `n` real samples along `axis`,
    /// scaled by `1/n`. Fewer than `n/2 + 1` bins means the missing high
    /// modes are zero. Imaginary parts of the DC (and even-length Nyquist)
    /// bins are projected out.
    pub fn irdft(re: Var<'t>, im: Var<'t>, axis: usize, n: usize) -> Result<Var<'t>, TensorError> {
        let (vr, vi) = (re.value(), im.value());
        if vr.shape() != vi.shape() {
            return Err(TensorError::Dimension {
                op: "irdft",
                lhs: vr.shape().to_vec(),
                rhs: vi.shape().to_vec(),
            });
        }
        check_axis("irdft", vr.shape(), axis)?;
        let (outer, bins, inner) = split_axis(vr.shape(), axis);
        if n == 0 || bins > n / 2 + 1 {
            return Err(TensorError::Contract(format!(
                "irdft: {bins} bins cannot describe a real signal of length {n}"
            )));
        }
        let data = dft::inverse(vr.data(), vi.data(), outer, n, bins, inner);
        let mut shape = vr.shape().to_vec();
        shape[axis] = n;
        let value = Tensor::new(&shape, data)?;
        let op = Op::Idft {
            re: re.id,
            im: im.id,
            axis,
            n,
        };
        Ok(re.record(value, op, &[re.id, im.id]))
    }
}

/// Broadcast result shape of two operands, exposed for layer code.
pub fn broadcast(a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    broadcast_shape("broadcast", a, b)
}
