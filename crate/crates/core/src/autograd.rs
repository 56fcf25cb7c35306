//! Minimal reverse-mode automatic differentiation over flat row-major
//! tensors.
//!
//! Each operation eagerly computes its forward value and records its
//! parents; `backward` on a scalar walks the graph once in reverse
//! topological order and accumulates gradients by addition. Graphs are
//! built per forward pass and freed when the loss tensor drops; there is
//! no tape reuse across steps.
//!
//! Shape errors are programmer errors and panic with the operation name
//! and both shapes.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::mem;
use std::rc::Rc;

use crate::scalar::Scalar;

/// Inputs to `log` are clamped to this floor before taking the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Norms are clamped to this floor in `l2_normalize`.
pub const NORM_CLAMP: f64 = 1e-12;

enum Op<S: Scalar> {
    Leaf,
    Add(Tensor<S>, Tensor<S>),
    Sub(Tensor<S>, Tensor<S>),
    Mul(Tensor<S>, Tensor<S>),
    Div(Tensor<S>, Tensor<S>),
    /// `a[r, c] + b[c]` — one row vector added to every row.
    AddRow(Tensor<S>, Tensor<S>),
    /// `a[r, c] * b[c]`
    MulRow(Tensor<S>, Tensor<S>),
    /// `a[r, c] - b[r]`
    SubCol(Tensor<S>, Tensor<S>),
    /// `a[r, c] / b[r]`
    DivCol(Tensor<S>, Tensor<S>),
    Affine {
        x: Tensor<S>,
        scale: S,
    },
    Exp(Tensor<S>),
    Log(Tensor<S>),
    Sqrt(Tensor<S>),
    Relu(Tensor<S>),
    Sigmoid(Tensor<S>),
    Tanh(Tensor<S>),
    Matmul(Tensor<S>, Tensor<S>),
    Transpose(Tensor<S>),
    Concat {
        axis: usize,
        parts: Vec<Tensor<S>>,
    },
    Slice {
        x: Tensor<S>,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(Tensor<S>),
    Sum {
        x: Tensor<S>,
        axis: usize,
    },
    Mean {
        x: Tensor<S>,
        axis: usize,
    },
    LogSumExp {
        x: Tensor<S>,
        axis: usize,
    },
    LogSoftmax(Tensor<S>),
    L2Normalize(Tensor<S>),
    GradReverse {
        x: Tensor<S>,
        alpha: S,
    },
}

impl<S: Scalar> Default for Op<S> {
    fn default() -> Self {
        Op::Leaf
    }
}

impl<S: Scalar> Op<S> {
    fn parents(&self) -> Vec<Tensor<S>> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::SubCol(a, b)
            | Op::DivCol(a, b)
            | Op::Matmul(a, b) => vec![a.clone(), b.clone()],
            Op::Affine { x, .. }
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sqrt(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Transpose(x)
            | Op::Slice { x, .. }
            | Op::Reshape(x)
            | Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::LogSumExp { x, .. }
            | Op::LogSoftmax(x)
            | Op::L2Normalize(x)
            | Op::GradReverse { x, .. } => vec![x.clone()],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

struct Inner<S: Scalar> {
    shape: Vec<usize>,
    values: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: bool,
    op: Op<S>,
}

impl<S: Scalar> Drop for Inner<S> {
    // Iterative teardown: long op chains (recurrent nets, DP recurrences)
    // would otherwise recurse once per node.
    fn drop(&mut self) {
        let mut work = mem::take(&mut self.op).parents();
        while let Some(t) = work.pop() {
            if let Some(mut inner) = Rc::into_inner(t.inner) {
                work.extend(mem::take(&mut inner.op).parents());
            }
        }
    }
}

/// Autodiff-tracked multidimensional value. Cheap to clone (shared
/// reference); cloning does not copy data.
pub struct Tensor<S: Scalar> {
    inner: Rc<Inner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    fn raw(shape: Vec<usize>, values: Vec<S>, requires_grad: bool, op: Op<S>) -> Self {
        assert_eq!(
            values.len(),
            numel_of(&shape),
            "tensor: {} values do not fill shape {:?}",
            values.len(),
            shape
        );
        Tensor {
            inner: Rc::new(Inner {
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    fn from_op(shape: Vec<usize>, values: Vec<S>, op: Op<S>) -> Self {
        let requires = op.parents().iter().any(|p| p.requires_grad());
        Tensor::raw(shape, values, requires, op)
    }

    /// Untracked leaf: no gradient will be computed for it.
    pub fn constant(shape: &[usize], values: Vec<S>) -> Self {
        Tensor::raw(shape.to_vec(), values, false, Op::Leaf)
    }

    /// Tracked leaf (a parameter): `backward` populates its gradient.
    pub fn param(shape: &[usize], values: Vec<S>) -> Self {
        Tensor::raw(shape.to_vec(), values, true, Op::Leaf)
    }

    pub fn scalar(value: S) -> Self {
        Tensor::constant(&[], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::constant(shape, vec![S::zero(); numel_of(shape)])
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Tensor::constant(shape, vec![value; numel_of(shape)])
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn values(&self) -> Ref<'_, Vec<S>> {
        self.inner.values.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.values.borrow().clone()
    }

    /// Scalar extraction; panics unless the tensor holds exactly one value.
    pub fn item(&self) -> S {
        assert_eq!(
            self.numel(),
            1,
            "item: tensor of shape {:?} is not a scalar",
            self.shape()
        );
        self.inner.values.borrow()[0]
    }

    /// Overwrite the stored values in place (optimizer updates). Only
    /// meaningful on leaves that are reused across steps.
    pub fn set_values(&self, values: &[S]) {
        let mut v = self.inner.values.borrow_mut();
        assert_eq!(
            v.len(),
            values.len(),
            "set_values: length {} does not match tensor of shape {:?}",
            values.len(),
            self.shape()
        );
        v.copy_from_slice(values);
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, contrib: Vec<S>) {
        debug_assert_eq!(contrib.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contrib),
        }
    }

    fn key(&self) -> *const Inner<S> {
        Rc::as_ptr(&self.inner)
    }

    // ---- elementwise binary ---------------------------------------------

    fn check_same_shape(&self, other: &Tensor<S>, op: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    pub fn add(&self, other: &Tensor<S>) -> Tensor<S> {
        self.check_same_shape(other, "add");
        let v = zip_map(&self.values(), &other.values(), |a, b| a + b);
        Tensor::from_op(self.shape().to_vec(), v, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Tensor<S>) -> Tensor<S> {
        self.check_same_shape(other, "sub");
        let v = zip_map(&self.values(), &other.values(), |a, b| a - b);
        Tensor::from_op(self.shape().to_vec(), v, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Tensor<S>) -> Tensor<S> {
        self.check_same_shape(other, "mul");
        let v = zip_map(&self.values(), &other.values(), |a, b| a * b);
        Tensor::from_op(self.shape().to_vec(), v, Op::Mul(self.clone(), other.clone()))
    }

    pub fn div(&self, other: &Tensor<S>) -> Tensor<S> {
        self.check_same_shape(other, "div");
        let v = zip_map(&self.values(), &other.values(), |a, b| a / b);
        Tensor::from_op(self.shape().to_vec(), v, Op::Div(self.clone(), other.clone()))
    }

    // ---- row/column broadcasts over 2-D tensors -------------------------

    fn check_matrix_vec(&self, vec: &Tensor<S>, want: usize, op: &str) {
        assert_eq!(self.rank(), 2, "{op}: expected a matrix, got {:?}", self.shape());
        assert_eq!(
            vec.shape(),
            [want],
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(),
            vec.shape()
        );
    }

    /// Add a length-C vector to every row of an R x C matrix.
    pub fn add_row(&self, bias: &Tensor<S>) -> Tensor<S> {
        self.check_matrix_vec(bias, self.shape()[1], "add_row");
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let x = self.values();
        let b = bias.values();
        let mut v = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                v.push(x[i * c + j] + b[j]);
            }
        }
        Tensor::from_op(vec![r, c], v, Op::AddRow(self.clone(), bias.clone()))
    }

    /// Multiply every row of an R x C matrix elementwise by a length-C vector.
    pub fn mul_row(&self, gain: &Tensor<S>) -> Tensor<S> {
        self.check_matrix_vec(gain, self.shape()[1], "mul_row");
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let x = self.values();
        let g = gain.values();
        let mut v = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                v.push(x[i * c + j] * g[j]);
            }
        }
        Tensor::from_op(vec![r, c], v, Op::MulRow(self.clone(), gain.clone()))
    }

    /// Subtract a length-R vector from an R x C matrix, row r minus col[r].
    pub fn sub_col(&self, col: &Tensor<S>) -> Tensor<S> {
        self.check_matrix_vec(col, self.shape()[0], "sub_col");
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let x = self.values();
        let m = col.values();
        let mut v = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                v.push(x[i * c + j] - m[i]);
            }
        }
        Tensor::from_op(vec![r, c], v, Op::SubCol(self.clone(), col.clone()))
    }

    /// Divide row r of an R x C matrix by col[r].
    pub fn div_col(&self, col: &Tensor<S>) -> Tensor<S> {
        self.check_matrix_vec(col, self.shape()[0], "div_col");
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let x = self.values();
        let m = col.values();
        let mut v = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                v.push(x[i * c + j] / m[i]);
            }
        }
        Tensor::from_op(vec![r, c], v, Op::DivCol(self.clone(), col.clone()))
    }

    // ---- elementwise unary ----------------------------------------------

    /// `scale * x + shift` with compile-time constants.
    pub fn affine(&self, scale: S, shift: S) -> Tensor<S> {
        let v = self.values().iter().map(|&x| scale * x + shift).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            v,
            Op::Affine {
                x: self.clone(),
                scale,
            },
        )
    }

    pub fn scale(&self, k: S) -> Tensor<S> {
        self.affine(k, S::zero())
    }

    pub fn neg(&self) -> Tensor<S> {
        self.affine(-S::one(), S::zero())
    }

    pub fn exp(&self) -> Tensor<S> {
        let v = self.values().iter().map(|x| x.exp()).collect();
        Tensor::from_op(self.shape().to_vec(), v, Op::Exp(self.clone()))
    }

    /// Natural log of `max(x, LOG_CLAMP)`.
    pub fn log(&self) -> Tensor<S> {
        let floor = S::of(LOG_CLAMP);
        let v = self.values().iter().map(|&x| x.max(floor).ln()).collect();
        Tensor::from_op(self.shape().to_vec(), v, Op::Log(self.clone()))
    }

    pub fn sqrt(&self) -> Tensor<S> {
        let v = self.values().iter().map(|x| x.sqrt()).collect();
        Tensor::from_op(self.shape().to_vec(), v, Op::Sqrt(self.clone()))
    }

    pub fn relu(&self) -> Tensor<S> {
        let v = self.values().iter().map(|&x| x.max(S::zero())).collect();
        Tensor::from_op(self.shape().to_vec(), v, Op::Relu(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        let v = self.values().iter().map(|&x| sigmoid(x)).collect();
        Tensor::from_op(self.shape().to_vec(), v, Op::Sigmoid(self.clone()))
    }

    pub fn tanh(&self) -> Tensor<S> {
        let v = self.values().iter().map(|x| x.tanh()).collect();
        Tensor::from_op(self.shape().to_vec(), v, Op::Tanh(self.clone()))
    }

    /// Identity forward; multiplies the backward gradient by `-alpha`.
    pub fn grad_reverse(&self, alpha: S) -> Tensor<S> {
        assert!(
            alpha > S::zero(),
            "grad_reverse: alpha must be positive, got {alpha}"
        );
        let v = self.to_vec();
        Tensor::from_op(
            self.shape().to_vec(),
            v,
            Op::GradReverse {
                x: self.clone(),
                alpha,
            },
        )
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&self, other: &Tensor<S>) -> Tensor<S> {
        assert!(
            self.rank() == 2 && other.rank() == 2 && self.shape()[1] == other.shape()[0],
            "matmul: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let v = matmul_raw(&self.values(), &other.values(), m, k, n);
        Tensor::from_op(vec![m, n], v, Op::Matmul(self.clone(), other.clone()))
    }

    pub fn transpose(&self) -> Tensor<S> {
        assert_eq!(
            self.rank(),
            2,
            "transpose: expected a matrix, got {:?}",
            self.shape()
        );
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let x = self.values();
        let mut v = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                v[j * r + i] = x[i * c + j];
            }
        }
        Tensor::from_op(vec![c, r], v, Op::Transpose(self.clone()))
    }

    // ---- shape ops --------------------------------------------------------

    pub fn concat(axis: usize, parts: &[Tensor<S>]) -> Tensor<S> {
        assert!(!parts.is_empty(), "concat: no parts");
        let first = parts[0].shape().to_vec();
        assert!(axis < first.len(), "concat: axis {axis} out of range for {first:?}");
        let mut axis_total = 0;
        for p in parts {
            assert_eq!(p.rank(), first.len(), "concat: rank mismatch {:?} vs {:?}", p.shape(), first);
            for (d, (&a, &b)) in p.shape().iter().zip(first.iter()).enumerate() {
                assert!(
                    d == axis || a == b,
                    "concat: shape mismatch {:?} vs {:?} off axis {axis}",
                    p.shape(),
                    first
                );
            }
            axis_total += p.shape()[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut v = Vec::with_capacity(numel_of(&shape));
        for o in 0..outer {
            for p in parts {
                let slab = p.shape()[axis] * inner;
                let vals = p.values();
                v.extend_from_slice(&vals[o * slab..(o + 1) * slab]);
            }
        }
        Tensor::from_op(
            shape,
            v,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
        )
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Tensor<S> {
        assert!(axis < self.rank(), "slice: axis {axis} out of range for {:?}", self.shape());
        assert!(
            start + len <= self.shape()[axis],
            "slice: range {start}..{} exceeds axis {axis} of {:?}",
            start + len,
            self.shape()
        );
        let outer: usize = self.shape()[..axis].iter().product();
        let n = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let x = self.values();
        let mut v = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            v.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op(
            shape,
            v,
            Op::Slice {
                x: self.clone(),
                axis,
                start,
                len,
            },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<S> {
        assert_eq!(
            numel_of(shape),
            self.numel(),
            "reshape: {:?} does not hold the {} values of {:?}",
            shape,
            self.numel(),
            self.shape()
        );
        Tensor::from_op(shape.to_vec(), self.to_vec(), Op::Reshape(self.clone()))
    }

    // ---- reductions ---------------------------------------------------------

    fn reduce_dims(&self, axis: usize, op: &str) -> (usize, usize, usize) {
        assert!(
            axis < self.rank(),
            "{op}: axis {axis} out of range for {:?}",
            self.shape()
        );
        let outer: usize = self.shape()[..axis].iter().product();
        let n = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        (outer, n, inner)
    }

    fn reduced_shape(&self, axis: usize) -> Vec<usize> {
        let mut s = self.shape().to_vec();
        s.remove(axis);
        s
    }

    pub fn sum(&self, axis: usize) -> Tensor<S> {
        let (outer, n, inner) = self.reduce_dims(axis, "sum");
        let x = self.values();
        let mut v = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                for i in 0..inner {
                    v[o * inner + i] += x[(o * n + a) * inner + i];
                }
            }
        }
        Tensor::from_op(self.reduced_shape(axis), v, Op::Sum { x: self.clone(), axis })
    }

    pub fn mean(&self, axis: usize) -> Tensor<S> {
        let (outer, n, inner) = self.reduce_dims(axis, "mean");
        assert!(n > 0, "mean: axis {axis} of {:?} is empty", self.shape());
        let x = self.values();
        let inv = S::one() / S::of(n as f64);
        let mut v = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                for i in 0..inner {
                    v[o * inner + i] += x[(o * n + a) * inner + i];
                }
            }
        }
        for vi in v.iter_mut() {
            *vi *= inv;
        }
        Tensor::from_op(self.reduced_shape(axis), v, Op::Mean { x: self.clone(), axis })
    }

    /// log(sum(exp(x))) along `axis`, computed with max subtraction.
    pub fn log_sum_exp(&self, axis: usize) -> Tensor<S> {
        let (outer, n, inner) = self.reduce_dims(axis, "log_sum_exp");
        assert!(n > 0, "log_sum_exp: axis {axis} of {:?} is empty", self.shape());
        let x = self.values();
        let mut v = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut m = x[(o * n) * inner + i];
                for a in 1..n {
                    m = m.max(x[(o * n + a) * inner + i]);
                }
                let mut s = S::zero();
                for a in 0..n {
                    s += (x[(o * n + a) * inner + i] - m).exp();
                }
                v[o * inner + i] = m + s.ln();
            }
        }
        Tensor::from_op(
            self.reduced_shape(axis),
            v,
            Op::LogSumExp { x: self.clone(), axis },
        )
    }

    /// Log-softmax over the last axis, max-subtracted for stability.
    pub fn log_softmax(&self) -> Tensor<S> {
        assert!(self.rank() >= 1, "log_softmax: rank-0 tensor");
        let c = *self.shape().last().unwrap();
        assert!(c > 0, "log_softmax: empty last axis in {:?}", self.shape());
        let rows = self.numel() / c;
        let x = self.values();
        let mut v = vec![S::zero(); self.numel()];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let m = row.iter().fold(row[0], |acc, &xi| acc.max(xi));
            let mut s = S::zero();
            for &xi in row {
                s += (xi - m).exp();
            }
            let lse = m + s.ln();
            for j in 0..c {
                v[r * c + j] = row[j] - lse;
            }
        }
        Tensor::from_op(self.shape().to_vec(), v, Op::LogSoftmax(self.clone()))
    }

    /// Rows scaled to unit Euclidean norm along the last axis.
    pub fn l2_normalize(&self) -> Tensor<S> {
        assert!(self.rank() >= 1, "l2_normalize: rank-0 tensor");
        let c = *self.shape().last().unwrap();
        let rows = self.numel() / c;
        let x = self.values();
        let mut v = vec![S::zero(); self.numel()];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let norm = row_norm(row);
            for j in 0..c {
                v[r * c + j] = row[j] / norm;
            }
        }
        Tensor::from_op(self.shape().to_vec(), v, Op::L2Normalize(self.clone()))
    }

    pub fn sum_all(&self) -> Tensor<S> {
        self.reshape(&[self.numel()]).sum(0)
    }

    pub fn mean_all(&self) -> Tensor<S> {
        self.reshape(&[self.numel()]).mean(0)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Gradients from multiple
    /// consumers accumulate by addition; leaves created with `param`
    /// end up with their gradient populated.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            self.shape()
        );
        if !self.requires_grad() {
            return;
        }
        self.accumulate_grad(vec![S::one()]);
        let order = topo_order(self);
        for node in order.iter().rev() {
            let upstream = node
                .inner
                .grad
                .borrow()
                .clone()
                .expect("reverse sweep reached a node before its consumers");
            node.backprop(&upstream);
            // Intermediate grads are only needed once; keep leaf grads.
            if !matches!(node.inner.op, Op::Leaf) {
                *node.inner.grad.borrow_mut() = None;
            }
        }
    }

    fn backprop(&self, up: &[S]) {
        match &self.inner.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(a, || up.to_vec());
                send(b, || up.to_vec());
            }
            Op::Sub(a, b) => {
                send(a, || up.to_vec());
                send(b, || up.iter().map(|&u| -u).collect());
            }
            Op::Mul(a, b) => {
                send(a, || zip_map(up, &b.values(), |u, bv| u * bv));
                send(b, || zip_map(up, &a.values(), |u, av| u * av));
            }
            Op::Div(a, b) => {
                send(a, || zip_map(up, &b.values(), |u, bv| u / bv));
                send(b, || {
                    let av = a.values();
                    let bv = b.values();
                    up.iter()
                        .enumerate()
                        .map(|(i, &u)| -u * av[i] / (bv[i] * bv[i]))
                        .collect()
                });
            }
            Op::AddRow(a, b) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                send(a, || up.to_vec());
                send(b, || {
                    let mut g = vec![S::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += up[i * c + j];
                        }
                    }
                    g
                });
            }
            Op::MulRow(a, b) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                send(a, || {
                    let bv = b.values();
                    let mut g = vec![S::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] = up[i * c + j] * bv[j];
                        }
                    }
                    g
                });
                send(b, || {
                    let av = a.values();
                    let mut g = vec![S::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += up[i * c + j] * av[i * c + j];
                        }
                    }
                    g
                });
            }
            Op::SubCol(a, b) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                send(a, || up.to_vec());
                send(b, || {
                    let mut g = vec![S::zero(); r];
                    for i in 0..r {
                        for j in 0..c {
                            g[i] -= up[i * c + j];
                        }
                    }
                    g
                });
            }
            Op::DivCol(a, b) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                send(a, || {
                    let bv = b.values();
                    let mut g = vec![S::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] = up[i * c + j] / bv[i];
                        }
                    }
                    g
                });
                send(b, || {
                    let av = a.values();
                    let bv = b.values();
                    let mut g = vec![S::zero(); r];
                    for i in 0..r {
                        let inv_sq = S::one() / (bv[i] * bv[i]);
                        for j in 0..c {
                            g[i] -= up[i * c + j] * av[i * c + j] * inv_sq;
                        }
                    }
                    g
                });
            }
            Op::Affine { x, scale } => {
                send(x, || up.iter().map(|&u| u * *scale).collect());
            }
            Op::Exp(x) => {
                let y = self.values();
                send(x, || zip_map(up, &y, |u, yi| u * yi));
            }
            Op::Log(x) => {
                send(x, || {
                    let floor = S::of(LOG_CLAMP);
                    let xv = x.values();
                    up.iter()
                        .enumerate()
                        .map(|(i, &u)| if xv[i] > floor { u / xv[i] } else { S::zero() })
                        .collect()
                });
            }
            Op::Sqrt(x) => {
                let y = self.values();
                send(x, || {
                    let half = S::of(0.5);
                    zip_map(up, &y, |u, yi| u * half / yi)
                });
            }
            Op::Relu(x) => {
                send(x, || {
                    let xv = x.values();
                    up.iter()
                        .enumerate()
                        .map(|(i, &u)| if xv[i] > S::zero() { u } else { S::zero() })
                        .collect()
                });
            }
            Op::Sigmoid(x) => {
                let y = self.values();
                send(x, || zip_map(up, &y, |u, yi| u * yi * (S::one() - yi)));
            }
            Op::Tanh(x) => {
                let y = self.values();
                send(x, || zip_map(up, &y, |u, yi| u * (S::one() - yi * yi)));
            }
            Op::Matmul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                send(a, || {
                    // dA = up (m x n) . B^T (n x k)
                    let bv = b.values();
                    let mut g = vec![S::zero(); m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let u = up[i * n + j];
                            for p in 0..k {
                                g[i * k + p] += u * bv[p * n + j];
                            }
                        }
                    }
                    g
                });
                send(b, || {
                    // dB = A^T (k x m) . up (m x n)
                    let av = a.values();
                    let mut g = vec![S::zero(); k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let ai = av[i * k + p];
                            for j in 0..n {
                                g[p * n + j] += ai * up[i * n + j];
                            }
                        }
                    }
                    g
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (x.shape()[0], x.shape()[1]);
                send(x, || {
                    let mut g = vec![S::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] = up[j * r + i];
                        }
                    }
                    g
                });
            }
            Op::Concat { axis, parts } => {
                let shape = self.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total_slab = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let slab = p.shape()[*axis] * inner;
                    let local = offset;
                    send(p, || {
                        let mut g = Vec::with_capacity(outer * slab);
                        for o in 0..outer {
                            let base = o * total_slab + local;
                            g.extend_from_slice(&up[base..base + slab]);
                        }
                        g
                    });
                    offset += slab;
                }
            }
            Op::Slice { x, axis, start, len } => {
                let (outer, n, inner) = x.reduce_dims(*axis, "slice");
                send(x, || {
                    let mut g = vec![S::zero(); x.numel()];
                    for o in 0..outer {
                        for a in 0..*len {
                            let src = (o * len + a) * inner;
                            let dst = (o * n + start + a) * inner;
                            g[dst..dst + inner].copy_from_slice(&up[src..src + inner]);
                        }
                    }
                    g
                });
            }
            Op::Reshape(x) => {
                send(x, || up.to_vec());
            }
            Op::Sum { x, axis } => {
                let (outer, n, inner) = x.reduce_dims(*axis, "sum");
                send(x, || {
                    let mut g = vec![S::zero(); x.numel()];
                    for o in 0..outer {
                        for a in 0..n {
                            for i in 0..inner {
                                g[(o * n + a) * inner + i] = up[o * inner + i];
                            }
                        }
                    }
                    g
                });
            }
            Op::Mean { x, axis } => {
                let (outer, n, inner) = x.reduce_dims(*axis, "mean");
                send(x, || {
                    let inv = S::one() / S::of(n as f64);
                    let mut g = vec![S::zero(); x.numel()];
                    for o in 0..outer {
                        for a in 0..n {
                            for i in 0..inner {
                                g[(o * n + a) * inner + i] = up[o * inner + i] * inv;
                            }
                        }
                    }
                    g
                });
            }
            Op::LogSumExp { x, axis } => {
                let (outer, n, inner) = x.reduce_dims(*axis, "log_sum_exp");
                let y = self.values();
                send(x, || {
                    let xv = x.values();
                    let mut g = vec![S::zero(); x.numel()];
                    for o in 0..outer {
                        for a in 0..n {
                            for i in 0..inner {
                                let idx = (o * n + a) * inner + i;
                                let w = (xv[idx] - y[o * inner + i]).exp();
                                g[idx] = up[o * inner + i] * w;
                            }
                        }
                    }
                    g
                });
            }
            Op::LogSoftmax(x) => {
                let c = *self.shape().last().unwrap();
                let rows = self.numel() / c;
                let y = self.values();
                send(x, || {
                    let mut g = vec![S::zero(); x.numel()];
                    for r in 0..rows {
                        let mut usum = S::zero();
                        for j in 0..c {
                            usum += up[r * c + j];
                        }
                        for j in 0..c {
                            let idx = r * c + j;
                            g[idx] = up[idx] - y[idx].exp() * usum;
                        }
                    }
                    g
                });
            }
            Op::L2Normalize(x) => {
                let c = *self.shape().last().unwrap();
                let rows = self.numel() / c;
                let y = self.values();
                send(x, || {
                    let xv = x.values();
                    let mut g = vec![S::zero(); x.numel()];
                    for r in 0..rows {
                        let norm = row_norm(&xv[r * c..(r + 1) * c]);
                        let mut dot = S::zero();
                        for j in 0..c {
                            dot += up[r * c + j] * y[r * c + j];
                        }
                        for j in 0..c {
                            let idx = r * c + j;
                            g[idx] = (up[idx] - y[idx] * dot) / norm;
                        }
                    }
                    g
                });
            }
            Op::GradReverse { x, alpha } => {
                send(x, || up.iter().map(|&u| -*alpha * u).collect());
            }
        }
    }
}

/// Accumulate a gradient contribution into `parent` unless it is untracked.
fn send<S: Scalar>(parent: &Tensor<S>, contrib: impl FnOnce() -> Vec<S>) {
    if parent.requires_grad() {
        parent.accumulate_grad(contrib());
    }
}

fn zip_map<S: Scalar>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn row_norm<S: Scalar>(row: &[S]) -> S {
    let mut s = S::zero();
    for &v in row {
        s += v * v;
    }
    s.sqrt().max(S::of(NORM_CLAMP))
}

fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

/// Post-order over the nodes that require gradients: parents precede
/// consumers. Iterative so deep graphs cannot overflow the stack.
fn topo_order<S: Scalar>(root: &Tensor<S>) -> Vec<Tensor<S>> {
    let mut order = Vec::new();
    let mut seen: HashSet<*const Inner<S>> = HashSet::new();
    let mut stack: Vec<(Tensor<S>, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !seen.insert(t.key()) {
            continue;
        }
        stack.push((t.clone(), true));
        for p in t.inner.op.parents() {
            if p.requires_grad() && !seen.contains(&p.key()) {
                stack.push((p, false));
            }
        }
    }
    order
}
