//! Append-only operation record with reverse-mode differentiation.
//!
//! Nodes are pushed in evaluation order, so node ids are already a
//! topological order and backward is a single reverse sweep.

use std::cell::{Ref, RefCell};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Shift(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Abs(usize),
    Sqrt(usize),
    Square(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    StraightThrough(usize),
    Sum(usize),
    SumAxis { input: usize, axis: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { input: usize, axis: usize, start: usize },
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of primitive operations. Single-threaded by construction.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a gradient-tracking input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    /// Registers `value` as a leaf when `track` is set, otherwise as a constant.
    pub fn input(&self, value: Tensor, track: bool) -> Var<'_> {
        if track {
            self.leaf(value)
        } else {
            self.constant(value)
        }
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn tracks(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Replays the tape backward from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(output.tape, self) {
            return Err(TensorError::InvalidArgument {
                op: "backward",
                reason: "output belongs to another tape".into(),
            });
        }
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.numel() != 1 {
            return Err(TensorError::NonScalarOutput(out.value.shape().to_vec()));
        }
        if !out.requires_grad {
            return Err(TensorError::DetachedOutput);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        grads[output.id] = Some(vec![1.0]);
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let out = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| match (&nodes[id].op, g) {
                (Op::Leaf, Some(g)) => Some(Tensor::from_parts(nodes[id].value.shape().to_vec(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }
}

/// Gradients of a scalar output with respect to every leaf it depends on.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when the output does not
    /// depend on it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if nodes[*a].requires_grad {
                // dA = G · Bᵀ
                let bd = bv.data();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        da[i * k + p] = dot(gi, brow);
                    }
                }
                accumulate(grads, nodes, *a, da);
            }
            if nodes[*b].requires_grad {
                // dB = Aᵀ · G
                let ad = av.data();
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let s = ad[i * k + p];
                        if s != 0.0 {
                            axpy(s, gi, &mut db[p * n..(p + 1) * n]);
                        }
                    }
                }
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Add(a, b) => {
            let os = out.shape();
            accumulate(grads, nodes, *a, unbroadcast(g, os, val(*a).shape()));
            accumulate(grads, nodes, *b, unbroadcast(g, os, val(*b).shape()));
        }
        Op::Sub(a, b) => {
            let os = out.shape();
            accumulate(grads, nodes, *a, unbroadcast(g, os, val(*a).shape()));
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            accumulate(grads, nodes, *b, unbroadcast(&neg, os, val(*b).shape()));
        }
        Op::Mul(a, b) => {
            let os = out.shape();
            let (av, bv) = (val(*a), val(*b));
            if nodes[*a].requires_grad {
                let ga = broadcast_zip(g, os, bv.data(), bv.shape(), |x, y| x * y);
                accumulate(grads, nodes, *a, unbroadcast(&ga, os, av.shape()));
            }
            if nodes[*b].requires_grad {
                let gb = broadcast_zip(g, os, av.data(), av.shape(), |x, y| x * y);
                accumulate(grads, nodes, *b, unbroadcast(&gb, os, bv.shape()));
            }
        }
        Op::Div(a, b) => {
            let os = out.shape();
            let (av, bv) = (val(*a), val(*b));
            if nodes[*a].requires_grad {
                let ga = broadcast_zip(g, os, bv.data(), bv.shape(), |x, y| x / y);
                accumulate(grads, nodes, *a, unbroadcast(&ga, os, av.shape()));
            }
            if nodes[*b].requires_grad {
                // d(a/b)/db = -out / b
                let tmp: Vec<f64> = g.iter().zip(out.data()).map(|(x, o)| -x * o).collect();
                let gb = broadcast_zip(&tmp, os, bv.data(), bv.shape(), |x, y| x / y);
                accumulate(grads, nodes, *b, unbroadcast(&gb, os, bv.shape()));
            }
        }
        Op::Neg(a) => accumulate(grads, nodes, *a, g.iter().map(|v| -v).collect()),
        Op::Scale(a, c) => accumulate(grads, nodes, *a, g.iter().map(|v| v * c).collect()),
        Op::Shift(a) | Op::Reshape(a) => accumulate(grads, nodes, *a, g.to_vec()),
        Op::LeakyRelu(a, slope) => {
            let x = val(*a).data();
            let d = g
                .iter()
                .zip(x)
                .map(|(gv, &xv)| if xv > 0.0 { *gv } else { gv * slope })
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Sigmoid(a) => {
            let d = g
                .iter()
                .zip(out.data())
                .map(|(gv, s)| gv * s * (1.0 - s))
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Exp(a) => {
            let d = g.iter().zip(out.data()).map(|(gv, e)| gv * e).collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Log(a) => {
            let d = g.iter().zip(val(*a).data()).map(|(gv, x)| gv / x).collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Softplus(a) => {
            let d = g
                .iter()
                .zip(val(*a).data())
                .map(|(gv, &x)| gv * sigmoid(x))
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Abs(a) => {
            let d = g
                .iter()
                .zip(val(*a).data())
                .map(|(gv, &x)| {
                    if x > 0.0 {
                        *gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Sqrt(a) => {
            let d = g
                .iter()
                .zip(out.data())
                .map(|(gv, s)| gv * 0.5 / s)
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Square(a) => {
            let d = g
                .iter()
                .zip(val(*a).data())
                .map(|(gv, x)| 2.0 * gv * x)
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Softmax(a) => {
            let d = softmax_vjp(out.data(), g, last_dim(out));
            accumulate(grads, nodes, *a, d);
        }
        Op::StraightThrough(a) => {
            let x = val(*a);
            let c = last_dim(x);
            let s = softmax_rows(x.data(), c);
            let d = softmax_vjp(&s, g, c);
            accumulate(grads, nodes, *a, d);
        }
        Op::LogSoftmax(a) => {
            let c = last_dim(out);
            let mut d = vec![0.0; g.len()];
            for ((drow, grow), orow) in d
                .chunks_mut(c)
                .zip(g.chunks(c))
                .zip(out.data().chunks(c))
            {
                let gs: f64 = grow.iter().sum();
                for j in 0..c {
                    drow[j] = grow[j] - orow[j].exp() * gs;
                }
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::LogSumExp(a) => {
            let x = val(*a);
            let c = last_dim(x);
            let s = softmax_rows(x.data(), c);
            let mut d = s;
            for (row, gv) in d.chunks_mut(c).zip(g) {
                row.iter_mut().for_each(|v| *v *= gv);
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::Sum(a) => {
            let n = val(*a).numel();
            accumulate(grads, nodes, *a, vec![g[0]; n]);
        }
        Op::SumAxis { input, axis } => {
            let shape = val(*input).shape();
            let (outer, len, inner) = split_axis(shape, *axis);
            let mut d = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                    dst.copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            accumulate(grads, nodes, *input, d);
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &i in inputs {
                let len = val(i).shape()[*axis];
                if nodes[i].requires_grad {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g[start..start + len * inner]);
                    }
                    accumulate(grads, nodes, i, d);
                }
                offset += len;
            }
        }
        Op::Narrow { input, axis, start } => {
            let in_shape = val(*input).shape();
            let (outer, total, inner) = split_axis(in_shape, *axis);
            let len = out.shape()[*axis];
            let mut d = vec![0.0; outer * total * inner];
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                d[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(grads, nodes, *input, d);
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Current value (cheap: shares the underlying buffer).
    pub fn value(&self) -> Tensor {
        self.tape.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.value_ref(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.tracks(self.id)
    }

    fn check_same_tape(&self, other: &Var<'_>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::InvalidArgument {
                op,
                reason: "operands live on different tapes".into(),
            })
        }
    }

    fn unary(&self, op: Op, value: Tensor) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        self.tape.value_ref(self.id).map(f)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.check_same_tape(&other, name)?;
        let value = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
                TensorError::ShapeMismatch {
                    op: name,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                }
            })?;
            let data = if a.shape() == b.shape() {
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
            } else {
                let a_full = expand(a.data(), a.shape(), &shape);
                broadcast_zip(&a_full, &shape, b.data(), b.shape(), &f)
            };
            Tensor::from_parts(shape, data)
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, op, rg))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other, "matmul")?;
        let value = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![0.0; m * n];
            let (ad, bd) = (a.data(), b.data());
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let s = ad[i * k + p];
                    if s != 0.0 {
                        axpy(s, &bd[p * n..(p + 1) * n], crow);
                    }
                }
            }
            Tensor::from_parts(vec![m, n], c)
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(&self) -> Var<'t> {
        let v = self.map(|x| -x);
        self.unary(Op::Neg(self.id), v)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.map(|x| x * c);
        self.unary(Op::Scale(self.id, c), v)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = self.map(|x| x + c);
        self.unary(Op::Shift(self.id), v)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        let v = self.map(|x| if x > 0.0 { x } else { slope * x });
        self.unary(Op::LeakyRelu(self.id, slope), v)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let v = self.map(sigmoid);
        self.unary(Op::Sigmoid(self.id), v)
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.map(f64::exp);
        self.unary(Op::Exp(self.id), v)
    }

    pub fn ln(&self) -> Var<'t> {
        let v = self.map(f64::ln);
        self.unary(Op::Log(self.id), v)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&self) -> Var<'t> {
        let v = self.map(softplus);
        self.unary(Op::Softplus(self.id), v)
    }

    /// Elementwise absolute value; the subgradient at 0 is taken as 0.
    pub fn abs(&self) -> Var<'t> {
        let v = self.map(f64::abs);
        self.unary(Op::Abs(self.id), v)
    }

    pub fn sqrt(&self) -> Var<'t> {
        let v = self.map(f64::sqrt);
        self.unary(Op::Sqrt(self.id), v)
    }

    pub fn square(&self) -> Var<'t> {
        let v = self.map(|x| x * x);
        self.unary(Op::Square(self.id), v)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t> {
        let v = {
            let x = self.tape.value_ref(self.id);
            Tensor::from_parts(x.shape().to_vec(), softmax_rows(x.data(), last_dim(&x)))
        };
        self.unary(Op::Softmax(self.id), v)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Var<'t> {
        let v = {
            let x = self.tape.value_ref(self.id);
            let c = last_dim(&x);
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(c) {
                let lse = log_sum_exp(row);
                row.iter_mut().for_each(|v| *v -= lse);
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        };
        self.unary(Op::LogSoftmax(self.id), v)
    }

    /// Log-sum-exp over the last axis; the last axis is removed (a rank-1
    /// input yields shape `[1]`).
    pub fn log_sum_exp(&self) -> Var<'t> {
        let v = {
            let x = self.tape.value_ref(self.id);
            let c = last_dim(&x);
            let out: Vec<f64> = x.data().chunks(c).map(log_sum_exp).collect();
            Tensor::from_parts(reduced_shape(x.shape(), x.rank() - 1), out)
        };
        self.unary(Op::LogSumExp(self.id), v)
    }

    /// Softmax straight-through estimator over the last axis: the forward
    /// value is the one-hot of the argmax, the backward pass uses the
    /// softmax Jacobian.
    pub fn straight_through_one_hot(&self) -> Var<'t> {
        let v = {
            let x = self.tape.value_ref(self.id);
            let c = last_dim(&x);
            let mut out = vec![0.0; x.numel()];
            for (orow, xrow) in out.chunks_mut(c).zip(x.data().chunks(c)) {
                orow[argmax(xrow)] = 1.0;
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        };
        self.unary(Op::StraightThrough(self.id), v)
    }

    /// Sum of every element, shape `[1]`.
    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.tape.value_ref(self.id).sum());
        self.unary(Op::Sum(self.id), v)
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.tape.value_ref(self.id).numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over `axis`, removing it (rank-1 inputs reduce to shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let v = {
            let x = self.tape.value_ref(self.id);
            if axis >= x.rank() {
                return Err(TensorError::InvalidArgument {
                    op: "sum_axis",
                    reason: format!("axis {axis} out of range for shape {:?}", x.shape()),
                });
            }
            let (outer, len, inner) = split_axis(x.shape(), axis);
            let mut out = vec![0.0; outer * inner];
            let d = x.data();
            for o in 0..outer {
                let dst = &mut out[o * inner..(o + 1) * inner];
                for l in 0..len {
                    let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
            Tensor::from_parts(reduced_shape(x.shape(), axis), out)
        };
        Ok(self.unary(Op::SumAxis { input: self.id, axis }, v))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let len = *shape.get(axis).ok_or_else(|| TensorError::InvalidArgument {
            op: "mean_axis",
            reason: format!("axis {axis} out of range for shape {shape:?}"),
        })?;
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = {
            let x = self.tape.value_ref(self.id);
            if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
                return Err(TensorError::InvalidArgument {
                    op: "narrow",
                    reason: format!(
                        "range {start}..{} on axis {axis} of shape {:?}",
                        start + len,
                        x.shape()
                    ),
                });
            }
            let (outer, total, inner) = split_axis(x.shape(), axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = (o * total + start) * inner;
                out.extend_from_slice(&x.data()[s..s + len * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = len;
            Tensor::from_parts(shape, out)
        };
        Ok(self.unary(
            Op::Narrow {
                input: self.id,
                axis,
                start,
            },
            v,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.tape.value_ref(self.id).reshape(shape)?;
        Ok(self.unary(Op::Reshape(self.id), v))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        for p in parts {
            first.check_same_tape(p, "concat")?;
        }
        let tape = first.tape;
        let value = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| tape.value_ref(p.id)).collect();
            let base = vals[0].shape().to_vec();
            if axis >= base.len() {
                return Err(TensorError::InvalidArgument {
                    op: "concat",
                    reason: format!("axis {axis} out of range for shape {base:?}"),
                });
            }
            let mut total = 0;
            for v in &vals {
                let s = v.shape();
                let compatible = s.len() == base.len()
                    && s.iter()
                        .zip(&base)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: base.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let (outer, _, inner) = split_axis(&base, axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &vals {
                    let len = v.shape()[axis];
                    out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::from_parts(shape, out)
        };
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(tape.push(
            value,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        ))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn softmax_rows(x: &[f64], c: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

fn softmax_vjp(s: &[f64], g: &[f64], c: usize) -> Vec<f64> {
    let mut d = vec![0.0; g.len()];
    for ((drow, srow), grow) in d.chunks_mut(c).zip(s.chunks(c)).zip(g.chunks(c)) {
        let inner = dot(srow, grow);
        for j in 0..c {
            drow[j] = srow[j] * (grow[j] - inner);
        }
    }
    d
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().expect("tensors have rank >= 1")
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != axis)
        .map(|(_, &d)| d)
        .collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += s * xv;
    }
}

/// Numpy-style broadcast of two shapes (aligned at the trailing axis).
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides for reading an array of `shape` as if it had `out_shape`;
/// broadcast axes get stride 0.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n = out_shape.len();
    let offset = n - shape.len();
    let mut strides = vec![0; n];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every multi-index of `out_shape` in row-major order, passing the
/// flat output index and the flat index into the broadcast operand.
fn for_each_broadcast(out_shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for flat in 0..total {
        f(flat, off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn expand(data: &[f64], shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if shape == out_shape {
        return data.to_vec();
    }
    let strides = broadcast_strides(shape, out_shape);
    let mut out = vec![0.0; out_shape.iter().product()];
    for_each_broadcast(out_shape, &strides, |i, j| out[i] = data[j]);
    out
}

/// `f(full[i], other[broadcast(i)])` over a full-shape buffer.
fn broadcast_zip(
    full: &[f64],
    out_shape: &[usize],
    other: &[f64],
    other_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if other_shape == out_shape {
        return full.iter().zip(other).map(|(&a, &b)| f(a, b)).collect();
    }
    let strides = broadcast_strides(other_shape, out_shape);
    let mut out = vec![0.0; full.len()];
    for_each_broadcast(out_shape, &strides, |i, j| out[i] = f(full[i], other[j]));
    out
}

/// Sums a gradient of `out_shape` down to `shape` over broadcast axes.
fn unbroadcast(g: &[f64], out_shape: &[usize], shape: &[usize]) -> Vec<f64> {
    if out_shape == shape {
        return g.to_vec();
    }
    let strides = broadcast_strides(shape, out_shape);
    let mut out = vec![0.0; shape.iter().product()];
    for_each_broadcast(out_shape, &strides, |i, j| out[j] += g[i]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        assert_eq!(x.softmax().value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn log_sum_exp_of_zeros_is_ln2() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        assert!((x.log_sum_exp().item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn matmul_hand_example() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_primitive() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "matmul", .. }));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.square();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.scale(0.0).add_scalar(7.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.0);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x.square()),
            Err(TensorError::NonScalarOutput(_))
        ));
        let c = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(
            tape.backward(c.exp()),
            Err(TensorError::DetachedOutput)
        ));
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = x.mul(x).unwrap().add(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 5.0);
    }

    #[test]
    fn row_broadcast_add_sums_gradient() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(t(&[2], &[10.0, 20.0]));
        let y = x.add(b).unwrap();
        assert_eq!(y.value().data(), &[11.0, 22.0, 13.0, 24.0, 15.0, 26.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn column_broadcast_mul() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.leaf(t(&[2, 1], &[10.0, 100.0]));
        let y = x.mul(s).unwrap();
        assert_eq!(y.value().data(), &[10.0, 20.0, 300.0, 400.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(s).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(g.get(x).unwrap().data(), &[10.0, 10.0, 100.0, 100.0]);
    }

    #[test]
    fn straight_through_forward_is_one_hot() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[0.1, 2.0, -1.0, 5.0, 4.0, 4.5]));
        let h = x.straight_through_one_hot();
        assert_eq!(h.value().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn narrow_and_concat_roundtrip() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let a = x.narrow(1, 0, 1).unwrap();
        let b = x.narrow(1, 1, 2).unwrap();
        let y = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(y.value(), x.value());
        let w = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let g = tape.backward(y.mul(w).unwrap().sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), w.value().data());
    }

    #[test]
    fn sum_axis_shapes() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(x.sum_axis(0).unwrap().value().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(x.sum_axis(1).unwrap().value().data(), &[6.0, 15.0]);
        assert_eq!(x.sum_axis(1).unwrap().shape(), vec![2]);
    }

    #[test]
    fn stable_softplus_and_sigmoid() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
