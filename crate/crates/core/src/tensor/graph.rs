use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, split_axis};
use super::Tensor;
use crate::error::{Error, Result};

/// Largest `f64` below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    /// Hyperbolic tangent, kept strictly inside (−1, 1) where rounding
    /// would otherwise saturate it to ±1.
    Tanh,
    Relu,
    Exp,
    Neg,
    /// Square root with derivative pinned to zero at the origin.
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    /// Gradient routes to the first maximal element along the axis.
    Max,
}

/// Which operand of a binary op is a leading-dimension-1 row broadcast.
#[derive(Clone, Copy, Debug)]
enum Broadcast {
    None,
    Lhs,
    Rhs,
}

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    Binary {
        op: Binary,
        a: usize,
        b: usize,
        bcast: Broadcast,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Unary {
        op: Unary,
        a: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    Reduce {
        op: Reduce,
        a: usize,
        axis: usize,
        argmax: Vec<usize>,
    },
    SumAll {
        a: usize,
    },
    MeanAll {
        a: usize,
    },
    Gather {
        a: usize,
        axis: usize,
        indices: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Reshape {
        a: usize,
    },
    Transpose {
        a: usize,
        dim0: usize,
        dim1: usize,
    },
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp>,
    },
}

/// Backward rule of an operation defined outside the core op set.
///
/// The forward value is computed by the caller and handed to
/// [`Graph::custom`]; the op keeps whatever it needs for the backward pass.
pub trait CustomOp {
    /// Gradients for each input given the output gradient `grad`. Entries
    /// whose `need` flag is false may be `None`.
    fn backward(
        &self,
        grad: &[f64],
        inputs: &[&Tensor],
        output: &Tensor,
        need: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records tensor operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and [`Graph::backward`] is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `output` as the result of `op` applied to `inputs`.
    pub fn custom<'g>(
        &'g self,
        inputs: &[Var<'g>],
        output: Tensor,
        op: Box<dyn CustomOp>,
    ) -> Result<Var<'g>> {
        for v in inputs {
            self.check_owner(*v)?;
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = ids.iter().any(|&i| self.requires(i));
        Ok(self.push(output, Op::Custom { inputs: ids, op }, rg))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Backpropagates from a one-element `loss`, adding into leaf gradients.
    ///
    /// Gradients accumulate across calls until [`Graph::zero_grad`]. After the
    /// sweep every leaf that requires grad holds a gradient, zero if the loss
    /// does not depend on it.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        self.check_owner(loss)?;
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if loss_value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let mut send = |target: usize, contribution: Vec<f64>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contribution) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            };
            match &node.op {
                Op::Leaf => leaf_grads.push((id, g)),
                Op::MatMul { a, b } => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (m, k) = (av.shape[0], av.shape[1]);
                    let n = bv.shape[1];
                    if nodes[*a].requires_grad {
                        let bt = kernels::transpose(&bv.data, k, n);
                        send(*a, kernels::matmul(&g, &bt, m, n, k));
                    }
                    if nodes[*b].requires_grad {
                        let at = kernels::transpose(&av.data, m, k);
                        send(*b, kernels::matmul(&at, &g, k, m, n));
                    }
                }
                Op::Binary { op, a, b, bcast } => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let need = (nodes[*a].requires_grad, nodes[*b].requires_grad);
                    let (ga, gb) = binary_backward(*op, &g, av, bv, *bcast, need);
                    if let Some(ga) = ga {
                        send(*a, ga);
                    }
                    if let Some(gb) = gb {
                        send(*b, gb);
                    }
                }
                Op::Scale { a, factor } => {
                    send(*a, g.iter().map(|v| v * factor).collect());
                }
                Op::Unary { op, a } => {
                    let x = &nodes[*a].value.data;
                    let y = &node.value.data;
                    let dx = match op {
                        Unary::Tanh => g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                        Unary::Relu => g
                            .iter()
                            .zip(x)
                            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                            .collect(),
                        Unary::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                        Unary::Neg => g.iter().map(|g| -g).collect(),
                        Unary::Sqrt => g
                            .iter()
                            .zip(y)
                            .map(|(g, y)| if *y > 0.0 { 0.5 * g / y } else { 0.0 })
                            .collect(),
                    };
                    send(*a, dx);
                }
                Op::Softmax { a, axis } => {
                    let y = &node.value;
                    let (_, len, inner) = split_axis(&y.shape, *axis);
                    let mut dx = vec![0.0; g.len()];
                    let mut dot = vec![0.0; inner];
                    let block = len * inner;
                    for ((gs, ys), ds) in g
                        .chunks_exact(block)
                        .zip(y.data.chunks_exact(block))
                        .zip(dx.chunks_exact_mut(block))
                    {
                        dot.fill(0.0);
                        for (gl, yl) in gs.chunks_exact(inner).zip(ys.chunks_exact(inner)) {
                            for ((d, gv), yv) in dot.iter_mut().zip(gl).zip(yl) {
                                *d += gv * yv;
                            }
                        }
                        for ((gl, yl), dl) in gs
                            .chunks_exact(inner)
                            .zip(ys.chunks_exact(inner))
                            .zip(ds.chunks_exact_mut(inner))
                        {
                            for (((o, gv), yv), d) in dl.iter_mut().zip(gl).zip(yl).zip(&dot) {
                                *o = yv * (gv - d);
                            }
                        }
                    }
                    send(*a, dx);
                }
                Op::Reduce {
                    op,
                    a,
                    axis,
                    argmax,
                } => {
                    let x = &nodes[*a].value;
                    let (outer, len, inner) = split_axis(&x.shape, *axis);
                    let mut dx = vec![0.0; x.numel()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let gi = g[o * inner + i];
                            let base = o * len * inner + i;
                            match op {
                                Reduce::Sum => {
                                    for l in 0..len {
                                        dx[base + l * inner] = gi;
                                    }
                                }
                                Reduce::Mean => {
                                    let s = gi / len as f64;
                                    for l in 0..len {
                                        dx[base + l * inner] = s;
                                    }
                                }
                                Reduce::Max => {
                                    let l = argmax[o * inner + i];
                                    dx[base + l * inner] = gi;
                                }
                            }
                        }
                    }
                    send(*a, dx);
                }
                Op::SumAll { a } => {
                    send(*a, vec![g[0]; nodes[*a].value.numel()]);
                }
                Op::MeanAll { a } => {
                    let n = nodes[*a].value.numel();
                    send(*a, vec![g[0] / n as f64; n]);
                }
                Op::Gather { a, axis, indices } => {
                    let x = &nodes[*a].value;
                    let (outer, len, inner) = split_axis(&x.shape, *axis);
                    let mut dx = vec![0.0; x.numel()];
                    let out_len = indices.len();
                    for o in 0..outer {
                        for (t, &src) in indices.iter().enumerate() {
                            let from = (o * out_len + t) * inner;
                            let to = (o * len + src) * inner;
                            for (d, s) in dx[to..to + inner].iter_mut().zip(&g[from..from + inner])
                            {
                                *d += s;
                            }
                        }
                    }
                    send(*a, dx);
                }
                Op::Concat { parts, axis } => {
                    let (outer, _, inner) = split_axis(&node.value.shape, *axis);
                    let total = node.value.shape[*axis];
                    let mut offset = 0;
                    for &p in parts {
                        let plen = nodes[p].value.shape[*axis];
                        if nodes[p].requires_grad {
                            let mut dp = Vec::with_capacity(outer * plen * inner);
                            for o in 0..outer {
                                let start = (o * total + offset) * inner;
                                dp.extend_from_slice(&g[start..start + plen * inner]);
                            }
                            send(p, dp);
                        }
                        offset += plen;
                    }
                }
                Op::Reshape { a } => send(*a, g),
                Op::Custom { inputs, op } => {
                    let values: Vec<&Tensor> = inputs.iter().map(|&i| &*nodes[i].value).collect();
                    let need: Vec<bool> = inputs.iter().map(|&i| nodes[i].requires_grad).collect();
                    let grads = op.backward(&g, &values, &node.value, &need);
                    for ((&i, gi), needed) in inputs.iter().zip(grads).zip(need) {
                        if let (Some(gi), true) = (gi, needed) {
                            send(i, gi);
                        }
                    }
                }
                Op::Transpose { a, dim0, dim1 } => {
                    // swapping the same pair of axes again inverts the permutation
                    let gt = Tensor {
                        shape: node.value.shape.clone(),
                        data: g,
                    };
                    send(*a, transpose_axes(&gt, *dim0, *dim1).data);
                }
            }
        }
        drop(nodes);
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            match &mut nodes[id].grad {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        for n in nodes[..=loss.id].iter_mut() {
            if matches!(n.op, Op::Leaf) && n.requires_grad && n.grad.is_none() {
                n.grad = Some(vec![0.0; n.value.numel()]);
            }
        }
        Ok(())
    }

    fn check_owner(&self, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.graph) {
            Ok(())
        } else {
            Err(Error::contract("variable belongs to a different graph"))
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Shared handle to the forward value.
    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self) -> Option<Tensor> {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        n.grad.as_ref().map(|g| Tensor {
            shape: n.value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn backward(&self) -> Result<()> {
        self.graph.backward(*self)
    }

    fn derive(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'g> {
        let rg = inputs.iter().any(|&i| self.graph.requires(i));
        self.graph.push(value, op, rg)
    }

    fn same_graph(&self, other: &Var<'_>) -> Result<()> {
        self.graph.check_owner(*other)
    }

    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let a = self.value();
        let b = other.value();
        if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
            return Err(Error::shape("matmul", &a.shape, &b.shape));
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let data = kernels::matmul(&a.data, &b.data, m, k, n);
        let out = Tensor {
            shape: vec![m, n],
            data,
        };
        Ok(self.derive(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
            &[self.id, other.id],
        ))
    }

    pub fn binary(&self, op: Binary, other: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let a = self.value();
        let b = other.value();
        let bcast = broadcast_kind(&a.shape, &b.shape)
            .ok_or_else(|| Error::shape(binary_name(op), &a.shape, &b.shape))?;
        let out = binary_forward(op, &a, &b, bcast);
        Ok(self.derive(
            out,
            Op::Binary {
                op,
                a: self.id,
                b: other.id,
                bcast,
            },
            &[self.id, other.id],
        ))
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(Binary::Add, other)
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(Binary::Sub, other)
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(Binary::Mul, other)
    }

    pub fn scale(&self, factor: f64) -> Var<'g> {
        let a = self.value();
        let out = Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|v| v * factor).collect(),
        };
        self.derive(out, Op::Scale { a: self.id, factor }, &[self.id])
    }

    pub fn unary(&self, op: Unary) -> Var<'g> {
        let a = self.value();
        let f: fn(f64) -> f64 = match op {
            Unary::Tanh => |x| x.tanh().clamp(-BELOW_ONE, BELOW_ONE),
            Unary::Relu => |x| if x > 0.0 { x } else { 0.0 },
            Unary::Exp => f64::exp,
            Unary::Neg => |x| -x,
            Unary::Sqrt => f64::sqrt,
        };
        let out = Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|&v| f(v)).collect(),
        };
        self.derive(out, Op::Unary { op, a: self.id }, &[self.id])
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(Unary::Tanh)
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(Unary::Relu)
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(Unary::Exp)
    }

    pub fn neg(&self) -> Var<'g> {
        self.unary(Unary::Neg)
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.unary(Unary::Sqrt)
    }

    /// Normalized exponential along `axis`, stabilized by the lane maximum.
    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        let a = self.value();
        if axis >= a.rank() {
            return Err(Error::shape("softmax", &a.shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&a.shape, axis);
        let mut data = vec![0.0; a.numel()];
        let mut max = vec![0.0; inner];
        let mut sum = vec![0.0; inner];
        for (src, dst) in a
            .data
            .chunks_exact(len * inner)
            .zip(data.chunks_exact_mut(len * inner))
        {
            max.fill(f64::NEG_INFINITY);
            for lane in src.chunks_exact(inner) {
                for (m, v) in max.iter_mut().zip(lane) {
                    *m = m.max(*v);
                }
            }
            sum.fill(0.0);
            for (lane, out) in src.chunks_exact(inner).zip(dst.chunks_exact_mut(inner)) {
                for (((o, v), m), s) in out.iter_mut().zip(lane).zip(&max).zip(sum.iter_mut()) {
                    *o = (v - m).exp();
                    *s += *o;
                }
            }
            for out in dst.chunks_exact_mut(inner) {
                for (o, s) in out.iter_mut().zip(&sum) {
                    *o /= s;
                }
            }
        }
        debug_assert_eq!(outer * len * inner, data.len());
        let out = Tensor {
            shape: a.shape.clone(),
            data,
        };
        Ok(self.derive(out, Op::Softmax { a: self.id, axis }, &[self.id]))
    }

    /// Softmax over the columns of each row of a matrix.
    pub fn softmax_rows(&self) -> Result<Var<'g>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::shape("softmax_rows", &shape, &[]));
        }
        self.softmax(1)
    }

    /// Reduces `axis` away.
    pub fn reduce(&self, op: Reduce, axis: usize) -> Result<Var<'g>> {
        let a = self.value();
        if axis >= a.rank() {
            return Err(Error::shape("reduce", &a.shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&a.shape, axis);
        let mut data = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if op == Reduce::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let slot = o * inner + i;
                match op {
                    Reduce::Sum | Reduce::Mean => {
                        let mut s = 0.0;
                        for l in 0..len {
                            s += a.data[base + l * inner];
                        }
                        data[slot] = if op == Reduce::Mean {
                            s / len as f64
                        } else {
                            s
                        };
                    }
                    Reduce::Max => {
                        let mut best = 0;
                        let mut best_v = a.data[base];
                        for l in 1..len {
                            let v = a.data[base + l * inner];
                            if v > best_v {
                                best = l;
                                best_v = v;
                            }
                        }
                        data[slot] = best_v;
                        argmax[slot] = best;
                    }
                }
            }
        }
        let mut shape = a.shape.clone();
        shape.remove(axis);
        let out = Tensor { shape, data };
        Ok(self.derive(
            out,
            Op::Reduce {
                op,
                a: self.id,
                axis,
                argmax,
            },
            &[self.id],
        ))
    }

    pub fn sum(&self, axis: usize) -> Result<Var<'g>> {
        self.reduce(Reduce::Sum, axis)
    }

    pub fn mean(&self, axis: usize) -> Result<Var<'g>> {
        self.reduce(Reduce::Mean, axis)
    }

    pub fn max(&self, axis: usize) -> Result<Var<'g>> {
        self.reduce(Reduce::Max, axis)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&self) -> Var<'g> {
        let s: f64 = self.value().data.iter().sum();
        self.derive(Tensor::scalar(s), Op::SumAll { a: self.id }, &[self.id])
    }

    pub fn mean_all(&self) -> Var<'g> {
        let a = self.value();
        let s: f64 = a.data.iter().sum::<f64>() / a.numel() as f64;
        self.derive(Tensor::scalar(s), Op::MeanAll { a: self.id }, &[self.id])
    }

    /// Selects slices along `axis` in the order given by `indices`.
    /// Repeated indices duplicate slices.
    pub fn gather(&self, indices: &[usize], axis: usize) -> Result<Var<'g>> {
        let a = self.value();
        if axis >= a.rank() || indices.is_empty() {
            return Err(Error::shape("gather", &a.shape, &[axis, indices.len()]));
        }
        let (outer, len, inner) = split_axis(&a.shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::Index {
                op: "gather",
                index: bad,
                len,
            });
        }
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &src in indices {
                let start = (o * len + src) * inner;
                data.extend_from_slice(&a.data[start..start + inner]);
            }
        }
        let mut shape = a.shape.clone();
        shape[axis] = indices.len();
        let out = Tensor { shape, data };
        Ok(self.derive(
            out,
            Op::Gather {
                a: self.id,
                axis,
                indices: indices.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = &values[0].shape;
        if axis >= base.len() {
            return Err(Error::shape("concat", base, &[axis]));
        }
        for (p, v) in parts.iter().zip(&values) {
            first.same_graph(p)?;
            let ok = v.rank() == base.len()
                && v.shape
                    .iter()
                    .zip(base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", base, &v.shape));
            }
        }
        let (outer, _, inner) = split_axis(base, axis);
        let total: usize = values.iter().map(|v| v.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape[axis] * inner;
                data.extend_from_slice(&v.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.derive(
            Tensor { shape, data },
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let numel: usize = shape.iter().product();
        if numel != a.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", &a.shape, shape));
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data: a.data.clone(),
        };
        Ok(self.derive(out, Op::Reshape { a: self.id }, &[self.id]))
    }

    /// Swaps two axes.
    pub fn transpose(&self, dim0: usize, dim1: usize) -> Result<Var<'g>> {
        let a = self.value();
        if dim0 >= a.rank() || dim1 >= a.rank() {
            return Err(Error::shape("transpose", &a.shape, &[dim0, dim1]));
        }
        let out = transpose_axes(&a, dim0, dim1);
        Ok(self.derive(
            out,
            Op::Transpose {
                a: self.id,
                dim0,
                dim1,
            },
            &[self.id],
        ))
    }

    /// Matrix transpose.
    pub fn t(&self) -> Result<Var<'g>> {
        if self.shape().len() != 2 {
            return Err(Error::shape("t", &self.shape(), &[]));
        }
        self.transpose(0, 1)
    }
}

fn binary_name(op: Binary) -> &'static str {
    match op {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
    }
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    if a == b {
        return Some(Broadcast::None);
    }
    if a.len() != b.len() || a.is_empty() || a[1..] != b[1..] {
        return None;
    }
    match (a[0], b[0]) {
        (1, _) => Some(Broadcast::Lhs),
        (_, 1) => Some(Broadcast::Rhs),
        _ => None,
    }
}

fn zip_with(op: Binary, x: &[f64], y: &[f64], out: &mut Vec<f64>) {
    match op {
        Binary::Add => out.extend(x.iter().zip(y).map(|(a, b)| a + b)),
        Binary::Sub => out.extend(x.iter().zip(y).map(|(a, b)| a - b)),
        Binary::Mul => out.extend(x.iter().zip(y).map(|(a, b)| a * b)),
    }
}

fn binary_forward(op: Binary, a: &Tensor, b: &Tensor, bcast: Broadcast) -> Tensor {
    let (shape, n) = match bcast {
        Broadcast::Lhs => (b.shape.clone(), b.numel()),
        _ => (a.shape.clone(), a.numel()),
    };
    let mut data = Vec::with_capacity(n);
    match bcast {
        Broadcast::None => zip_with(op, &a.data, &b.data, &mut data),
        Broadcast::Lhs => {
            for chunk in b.data.chunks_exact(a.numel()) {
                zip_with(op, &a.data, chunk, &mut data);
            }
        }
        Broadcast::Rhs => {
            for chunk in a.data.chunks_exact(b.numel()) {
                zip_with(op, chunk, &b.data, &mut data);
            }
        }
    }
    debug_assert_eq!(data.len(), n);
    Tensor { shape, data }
}

/// Sums a full-size gradient down to a single broadcast row.
fn fold_rows(g: &[f64], row: usize) -> Vec<f64> {
    let mut out = vec![0.0; row];
    for chunk in g.chunks_exact(row) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

/// `g ⊙ other`, where `other` may be a single row repeated over `g`.
fn scaled_by(g: &[f64], other: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(g.len());
    for chunk in g.chunks_exact(other.len()) {
        out.extend(chunk.iter().zip(other).map(|(a, b)| a * b));
    }
    out
}

/// Gradients of both operands; `None` where not required.
fn binary_backward(
    op: Binary,
    g: &[f64],
    a: &Tensor,
    b: &Tensor,
    bcast: Broadcast,
    need: (bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let ga = need.0.then(|| {
        let full = match op {
            Binary::Add | Binary::Sub => g.to_vec(),
            Binary::Mul => scaled_by(g, &b.data),
        };
        match bcast {
            Broadcast::Lhs => fold_rows(&full, a.numel()),
            _ => full,
        }
    });
    let gb = need.1.then(|| {
        let full = match op {
            Binary::Add => g.to_vec(),
            Binary::Sub => g.iter().map(|v| -v).collect(),
            Binary::Mul => scaled_by(g, &a.data),
        };
        match bcast {
            Broadcast::Rhs => fold_rows(&full, b.numel()),
            _ => full,
        }
    });
    (ga, gb)
}

fn transpose_axes(a: &Tensor, dim0: usize, dim1: usize) -> Tensor {
    let rank = a.rank();
    let mut shape = a.shape.clone();
    shape.swap(dim0, dim1);
    if rank == 2 && dim0 != dim1 {
        return Tensor {
            shape,
            data: kernels::transpose(&a.data, a.shape[0], a.shape[1]),
        };
    }
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * a.shape[d + 1];
    }
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(dim0, dim1);
    let mut data = Vec::with_capacity(a.numel());
    let mut idx = vec![0; rank];
    for _ in 0..a.numel() {
        let src: usize = idx.iter().zip(&perm_strides).map(|(i, s)| i * s).sum();
        data.push(a.data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor { shape, data }
}
