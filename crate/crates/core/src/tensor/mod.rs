//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tensor`] is a reference-counted node in a dynamically built graph.
//! Every operation checks shapes, rejects non-finite results, and records the
//! information its backward pass needs. [`Tensor::backward`] walks the graph
//! once in reverse topological order, summing gradients where subexpressions
//! are shared, and deposits the result on leaves that require gradients.
//!
//! Inside [`no_grad`] no graph is recorded, so intermediate activations are
//! released as soon as they go out of scope. Inference at full resolution
//! relies on this.

mod adam;
mod gradcheck;
mod params;

pub use adam::Adam;
pub use gradcheck::{check_gradients, rel_err, GradCheck};
pub use params::{Param, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{shape_err, Error, Result};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` without recording a graph. Tensors created inside are constants.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = NO_GRAD.with(|c| c.replace(true));
    let out = f();
    NO_GRAD.with(|c| c.set(prev));
    out
}

fn grad_enabled() -> bool {
    !NO_GRAD.with(|c| c.get())
}

/// Backward closure for custom ops: maps the output gradient to one gradient
/// buffer per parent, in parent order.
pub type CustomBackward = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

enum Op {
    MatMul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddRow(Tensor, Tensor),
    Relu(Tensor),
    Tanh(Tensor),
    MaxPool {
        x: Tensor,
        argmax: Vec<usize>,
    },
    ConcatCols(Vec<Tensor>),
    ConcatRows(Vec<Tensor>),
    TileRows(Tensor),
    RepeatRows(Tensor, usize),
    Reshape(Tensor),
    SliceRows(Tensor, usize),
    GatherRows(Tensor, Vec<usize>),
    Sum(Tensor),
    BatchNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Custom {
        parents: Vec<Tensor>,
        backward: CustomBackward,
    },
}

impl Op {
    fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![a, b]
            }
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Tanh(x)
            | Op::MaxPool { x, .. }
            | Op::TileRows(x)
            | Op::RepeatRows(x, _)
            | Op::Reshape(x)
            | Op::SliceRows(x, _)
            | Op::GatherRows(x, _)
            | Op::Sum(x) => vec![x],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.iter().collect(),
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Custom { parents, .. } => parents.iter().collect(),
        }
    }
}

struct Node {
    id: usize,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Option<Op>,
    grad: RefCell<Option<Vec<f64>>>,
    retain_grad: Cell<bool>,
    backward_done: Cell<bool>,
}

/// A dense row-major `f64` tensor participating in reverse-mode autodiff.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            op,
            grad: RefCell::new(None),
            retain_grad: Cell::new(false),
            backward_done: Cell::new(false),
        }))
    }

    /// Records the result of an op. The op record is kept only when grad
    /// mode is on and some parent needs a gradient.
    fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[&Tensor],
        op: impl FnOnce() -> Op,
    ) -> Result<Tensor> {
        check_finite(name, &data)?;
        let requires = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let op = if requires { Some(op()) } else { None };
        Ok(Tensor::make(shape, data, requires, op))
    }

    /// A leaf tensor. Leaves with `requires_grad` accumulate gradients.
    pub fn leaf(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err("leaf", format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        check_finite("leaf", &data)?;
        Ok(Tensor::make(shape.to_vec(), data, requires_grad, None))
    }

    /// A constant (no gradient) tensor.
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::leaf(shape, data, false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::make(shape.to_vec(), vec![0.0; n], false, None)
    }

    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::constant(&[1], vec![v])
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Rows of a matrix; a rank-1 tensor counts as a single row.
    pub fn rows(&self) -> usize {
        match self.0.shape.len() {
            1 => 1,
            _ => self.0.shape[0],
        }
    }

    /// Columns of a matrix; a rank-1 tensor's length.
    pub fn cols(&self) -> usize {
        match self.0.shape.len() {
            1 => self.0.shape[0],
            _ => self.0.shape[1..].iter().product(),
        }
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.0.data[i * c..(i + 1) * c]
    }

    /// Consumes the tensor and returns its buffer, copying only if shared.
    pub fn into_data(self) -> Vec<f64> {
        match Rc::try_unwrap(self.0) {
            Ok(node) => node.data,
            Err(rc) => rc.data.clone(),
        }
    }

    /// Accumulated gradient on a leaf (or on a node marked with
    /// [`Tensor::retain_grad`]).
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Keep this interior node's gradient after backward.
    pub fn retain_grad(&self) {
        self.0.retain_grad.set(true);
    }

    /// Allow [`Tensor::backward`] to run again from this root.
    pub fn reset_backward(&self) {
        self.0.backward_done.set(false);
    }

    fn is_matrix(&self) -> bool {
        self.0.shape.len() == 2
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if !self.is_matrix() {
            return shape_err(op, format!("expected a matrix, got shape {:?}", self.shape()));
        }
        Ok((self.0.shape[0], self.0.shape[1]))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_matrix("matmul")?;
        let (k2, n) = other.expect_matrix("matmul")?;
        if k != k2 {
            return shape_err("matmul", format!("{m}x{k} times {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), (k, 1), other.data(), (n, 1), &mut out, false);
        Tensor::from_op("matmul", vec![m, n], out, &[self, other], || {
            Op::MatMul(self.clone(), other.clone())
        })
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Tensor::from_op("add", self.shape().to_vec(), data, &[self, other], || {
            Op::Add(self.clone(), other.clone())
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Tensor::from_op("sub", self.shape().to_vec(), data, &[self, other], || {
            Op::Sub(self.clone(), other.clone())
        })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Tensor::from_op("mul", self.shape().to_vec(), data, &[self, other], || {
            Op::Mul(self.clone(), other.clone())
        })
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|a| a * s).collect();
        Tensor::from_op("scale", self.shape().to_vec(), data, &[self], || {
            Op::Scale(self.clone(), s)
        })
    }

    /// Adds a length-`c` bias to every row of an `n x c` matrix.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (n, c) = self.expect_matrix("add_row")?;
        if bias.numel() != c {
            return shape_err("add_row", format!("{n}x{c} plus bias of {}", bias.numel()));
        }
        let b = bias.data();
        let mut data = self.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, bj) in row.iter_mut().zip(b) {
                *v += bj;
            }
        }
        Tensor::from_op("add_row", vec![n, c], data, &[self, bias], || {
            Op::AddRow(self.clone(), bias.clone())
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        Tensor::from_op("relu", self.shape().to_vec(), data, &[self], || Op::Relu(self.clone()))
    }

    pub fn tanh(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v.tanh()).collect();
        Tensor::from_op("tanh", self.shape().to_vec(), data, &[self], || Op::Tanh(self.clone()))
    }

    /// Column-wise maximum over the rows of an `n x c` matrix, giving a
    /// length-`c` vector. The backward pass routes each column's gradient to
    /// the lowest row index attaining the maximum.
    pub fn max_pool_points(&self) -> Result<Tensor> {
        let (n, c) = self.expect_matrix("max_pool_points")?;
        if n == 0 {
            return Err(Error::Empty("max_pool_points over zero rows"));
        }
        let d = self.data();
        let mut best = d[..c].to_vec();
        let mut argmax = vec![0usize; c];
        for i in 1..n {
            let row = &d[i * c..(i + 1) * c];
            for j in 0..c {
                if row[j] > best[j] {
                    best[j] = row[j];
                    argmax[j] = i;
                }
            }
        }
        Tensor::from_op("max_pool_points", vec![c], best, &[self], || Op::MaxPool {
            x: self.clone(),
            argmax,
        })
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(xs: &[Tensor]) -> Result<Tensor> {
        let first = xs.first().ok_or(Error::Empty("concat_cols of nothing"))?;
        let n = first.expect_matrix("concat_cols")?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for x in xs {
            let (r, c) = x.expect_matrix("concat_cols")?;
            if r != n {
                return shape_err("concat_cols", format!("row counts {n} and {r}"));
            }
            widths.push(c);
        }
        if xs.len() == 1 {
            return Ok(first.clone());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (x, &c) in xs.iter().zip(&widths) {
                data.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
            }
        }
        let refs: Vec<&Tensor> = xs.iter().collect();
        Tensor::from_op("concat_cols", vec![n, total], data, &refs, || {
            Op::ConcatCols(xs.to_vec())
        })
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(xs: &[Tensor]) -> Result<Tensor> {
        let first = xs.first().ok_or(Error::Empty("concat_rows of nothing"))?;
        let c = first.expect_matrix("concat_rows")?.1;
        let mut n = 0;
        for x in xs {
            let (r, cc) = x.expect_matrix("concat_rows")?;
            if cc != c {
                return shape_err("concat_rows", format!("column counts {c} and {cc}"));
            }
            n += r;
        }
        if xs.len() == 1 {
            return Ok(first.clone());
        }
        let mut data = Vec::with_capacity(n * c);
        for x in xs {
            data.extend_from_slice(x.data());
        }
        let refs: Vec<&Tensor> = xs.iter().collect();
        Tensor::from_op("concat_rows", vec![n, c], data, &refs, || {
            Op::ConcatRows(xs.to_vec())
        })
    }

    /// Stacks a vector `n` times into an `n x c` matrix.
    pub fn tile_rows(&self, n: usize) -> Result<Tensor> {
        if self.rows() != 1 {
            return shape_err("tile_rows", format!("expected a vector, got {:?}", self.shape()));
        }
        let c = self.numel();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(self.data());
        }
        Tensor::from_op("tile_rows", vec![n, c], data, &[self], || Op::TileRows(self.clone()))
    }

    /// Repeats every row `r` times in place: row `i * r + k` of the output is
    /// row `i` of the input.
    pub fn repeat_rows(&self, r: usize) -> Result<Tensor> {
        let (n, c) = self.expect_matrix("repeat_rows")?;
        let mut data = Vec::with_capacity(n * r * c);
        for row in self.data().chunks_exact(c) {
            for _ in 0..r {
                data.extend_from_slice(row);
            }
        }
        Tensor::from_op("repeat_rows", vec![n * r, c], data, &[self], || {
            Op::RepeatRows(self.clone(), r)
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return shape_err("reshape", format!("{:?} to {shape:?}", self.shape()));
        }
        Tensor::from_op("reshape", shape.to_vec(), self.data().to_vec(), &[self], || {
            Op::Reshape(self.clone())
        })
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (n, c) = self.expect_matrix("slice_rows")?;
        if start > end || end > n {
            return shape_err("slice_rows", format!("rows {start}..{end} of {n}"));
        }
        let data = self.data()[start * c..end * c].to_vec();
        Tensor::from_op("slice_rows", vec![end - start, c], data, &[self], || {
            Op::SliceRows(self.clone(), start)
        })
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (n, c) = self.expect_matrix("gather_rows")?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return shape_err("gather_rows", format!("row {i} of {n}"));
            }
            data.extend_from_slice(&self.data()[i * c..(i + 1) * c]);
        }
        Tensor::from_op("gather_rows", vec![idx.len(), c], data, &[self], || {
            Op::GatherRows(self.clone(), idx.to_vec())
        })
    }

    pub fn sum(&self) -> Result<Tensor> {
        let s = self.data().iter().sum();
        Tensor::from_op("sum", vec![1], vec![s], &[self], || Op::Sum(self.clone()))
    }

    /// Normalizes each column over the rows with the batch's own statistics.
    /// Returns the output with the batch mean and (biased) variance.
    pub fn batch_norm_train(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let (n, c) = self.expect_matrix("batch_norm")?;
        if gamma.numel() != c || beta.numel() != c {
            return shape_err("batch_norm", format!("{c} channels, affine {}", gamma.numel()));
        }
        if n == 0 {
            return Err(Error::Empty("batch_norm over zero rows"));
        }
        let d = self.data();
        let mut mean = vec![0.0; c];
        for row in d.chunks_exact(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for row in d.chunks_exact(c) {
            for j in 0..c {
                let t = row[j] - mean[j];
                var[j] += t * t;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(gamma, beta, &mean, inv_std, true)?;
        Ok((out, mean, var))
    }

    /// Normalizes with fixed (running) statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Tensor> {
        let c = self.expect_matrix("batch_norm")?.1;
        if gamma.numel() != c || beta.numel() != c || mean.len() != c || var.len() != c {
            return shape_err("batch_norm", format!("{c} channels, affine {}", gamma.numel()));
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(gamma, beta, mean, inv_std, false)
    }

    fn bn_apply(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Tensor> {
        let c = self.cols();
        let (g, b) = (gamma.data(), beta.data());
        let mut xhat = self.data().to_vec();
        for row in xhat.chunks_exact_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(c) {
            for j in 0..c {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        Tensor::from_op("batch_norm", self.shape().to_vec(), out, &[self, gamma, beta], || {
            Op::BatchNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                inv_std,
                batch_stats,
            }
        })
    }

    /// Builds a node with a caller-supplied backward rule. `backward` maps the
    /// output gradient to one gradient per parent (same shapes as parents).
    pub fn custom(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: CustomBackward,
    ) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parents.iter().collect();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(name, format!("shape {shape:?} with {} values", data.len()));
        }
        Tensor::from_op(name, shape, data, &refs, || Op::Custom {
            parents: parents.clone(),
            backward,
        })
    }

    /// Reverse-mode sweep from a scalar root. Each reachable node is visited
    /// exactly once; gradients of shared subexpressions are summed.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarBackward(self.shape().to_vec()));
        }
        if self.0.backward_done.get() {
            return Err(Error::BackwardTwice);
        }
        if !self.requires_grad() {
            self.0.backward_done.set(true);
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.op {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    if node.0.retain_grad.get() {
                        *node.0.grad.borrow_mut() = Some(g.clone());
                    }
                    let parent_grads = backward_op(op, node, &g);
                    for (parent, pg) in op.parents().into_iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        match grads.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(parent.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        self.0.backward_done.set(true);
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for p in op.parents().into_iter().rev() {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

fn backward_op(op: &Op, out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let need = |t: &Tensor| t.requires_grad();
    match op {
        Op::MatMul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let ga = need(a).then(|| {
                let mut ga = vec![0.0; m * k];
                // g (m x n) * b^T (n x k)
                gemm(m, n, k, g, (n, 1), b.data(), (1, n), &mut ga, false);
                ga
            });
            let gb = need(b).then(|| {
                let mut gb = vec![0.0; k * n];
                // a^T (k x m) * g (m x n)
                gemm(k, m, n, a.data(), (1, k), g, (n, 1), &mut gb, false);
                gb
            });
            vec![ga, gb]
        }
        Op::Add(a, b) => vec![need(a).then(|| g.to_vec()), need(b).then(|| g.to_vec())],
        Op::Sub(a, b) => vec![
            need(a).then(|| g.to_vec()),
            need(b).then(|| g.iter().map(|v| -v).collect()),
        ],
        Op::Mul(a, b) => vec![
            need(a).then(|| g.iter().zip(b.data()).map(|(g, b)| g * b).collect()),
            need(b).then(|| g.iter().zip(a.data()).map(|(g, a)| g * a).collect()),
        ],
        Op::Scale(_, s) => vec![Some(g.iter().map(|v| v * s).collect())],
        Op::AddRow(x, b) => {
            let c = b.numel();
            let gb = need(b).then(|| column_sums(g, c));
            vec![need(x).then(|| g.to_vec()), gb]
        }
        Op::Relu(_) => vec![Some(
            g.iter()
                .zip(out.data())
                .map(|(g, &y)| if y > 0.0 { *g } else { 0.0 })
                .collect(),
        )],
        Op::Tanh(_) => vec![Some(
            g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect(),
        )],
        Op::MaxPool { x, argmax } => {
            let c = argmax.len();
            let mut gx = vec![0.0; x.numel()];
            for (j, &i) in argmax.iter().enumerate() {
                gx[i * c + j] += g[j];
            }
            vec![Some(gx)]
        }
        Op::ConcatCols(xs) => {
            let n = out.rows();
            let total = out.cols();
            let mut offset = 0;
            xs.iter()
                .map(|x| {
                    let c = x.cols();
                    let gx = need(x).then(|| {
                        let mut gx = Vec::with_capacity(n * c);
                        for i in 0..n {
                            gx.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        gx
                    });
                    offset += c;
                    gx
                })
                .collect()
        }
        Op::ConcatRows(xs) => {
            let mut offset = 0;
            xs.iter()
                .map(|x| {
                    let len = x.numel();
                    let gx = need(x).then(|| g[offset..offset + len].to_vec());
                    offset += len;
                    gx
                })
                .collect()
        }
        Op::TileRows(x) => vec![Some(column_sums(g, x.numel()))],
        Op::RepeatRows(x, r) => {
            let c = x.cols();
            let mut gx = vec![0.0; x.numel()];
            for (i, chunk) in g.chunks_exact(c * r).enumerate() {
                let dst = &mut gx[i * c..(i + 1) * c];
                for row in chunk.chunks_exact(c) {
                    dst.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
            }
            vec![Some(gx)]
        }
        Op::Reshape(_) => vec![Some(g.to_vec())],
        Op::SliceRows(x, start) => {
            let c = x.cols();
            let mut gx = vec![0.0; x.numel()];
            gx[start * c..start * c + g.len()].copy_from_slice(g);
            vec![Some(gx)]
        }
        Op::GatherRows(x, idx) => {
            let c = x.cols();
            let mut gx = vec![0.0; x.numel()];
            for (k, &i) in idx.iter().enumerate() {
                let src = &g[k * c..(k + 1) * c];
                gx[i * c..(i + 1) * c].iter_mut().zip(src).for_each(|(d, v)| *d += v);
            }
            vec![Some(gx)]
        }
        Op::Sum(x) => vec![Some(vec![g[0]; x.numel()])],
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let c = gamma.numel();
            let n = x.rows();
            let gam = gamma.data();
            let gbeta = need(beta).then(|| column_sums(g, c));
            let ggamma = need(gamma).then(|| {
                let mut s = vec![0.0; c];
                for (grow, xrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        s[j] += grow[j] * xrow[j];
                    }
                }
                s
            });
            let gx = need(x).then(|| {
                let mut gx = vec![0.0; g.len()];
                if *batch_stats {
                    let mut sum_d = vec![0.0; c];
                    let mut sum_dx = vec![0.0; c];
                    for (grow, xrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            let d = grow[j] * gam[j];
                            sum_d[j] += d;
                            sum_dx[j] += d * xrow[j];
                        }
                    }
                    let nf = n as f64;
                    for ((dst, grow), xrow) in gx
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(xhat.chunks_exact(c))
                    {
                        for j in 0..c {
                            let d = grow[j] * gam[j];
                            dst[j] = inv_std[j] / nf * (nf * d - sum_d[j] - xrow[j] * sum_dx[j]);
                        }
                    }
                } else {
                    for (dst, grow) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for j in 0..c {
                            dst[j] = grow[j] * gam[j] * inv_std[j];
                        }
                    }
                }
                gx
            });
            vec![gx, ggamma, gbeta]
        }
        Op::Custom { backward, .. } => backward(g).into_iter().map(Some).collect(),
    }
}

fn column_sums(g: &[f64], c: usize) -> Vec<f64> {
    let mut s = vec![0.0; c];
    for row in g.chunks_exact(c) {
        s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    s
}

/// `c = a * b` (or `c += a * b` when `accumulate`) for an `m x k` times
/// `k x n` product; strides are (row, column) in elements.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds asserted above; the strides describe views that stay
    // inside the checked slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Pointwise nonlinearity applied after a layer's affine map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    None,
}

/// Normalization applied between a layer's affine map and its activation.
pub enum Norm<'a> {
    None,
    /// Statistics of the current batch (rows).
    BatchTrain {
        gamma: &'a Tensor,
        beta: &'a Tensor,
    },
    /// Fixed running statistics.
    BatchEval {
        gamma: &'a Tensor,
        beta: &'a Tensor,
        mean: &'a [f64],
        var: &'a [f64],
    },
}

/// Epsilon added to variances inside batch normalization.
pub const BN_EPS: f64 = 1e-5;

/// Batch statistics observed by a training-mode normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// One layer of a shared (per-point) MLP: the same affine map applied to
/// every row, then optional normalization, then the activation.
pub fn shared_mlp_layer(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    activation: Activation,
    norm: Norm<'_>,
) -> Result<(Tensor, Option<BatchStats>)> {
    let h = x.matmul(w)?.add_row(b)?;
    let (h, stats) = match norm {
        Norm::None => (h, None),
        Norm::BatchTrain { gamma, beta } => {
            let (h, mean, var) = h.batch_norm_train(gamma, beta, BN_EPS)?;
            (h, Some(BatchStats { mean, var }))
        }
        Norm::BatchEval {
            gamma,
            beta,
            mean,
            var,
        } => (h.batch_norm_eval(gamma, beta, mean, var, BN_EPS)?, None),
    };
    let h = match activation {
        Activation::Relu => h.relu()?,
        Activation::Tanh => h.tanh()?,
        Activation::None => h,
    };
    Ok((h, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: &[f64], grad: bool) -> Tensor {
        Tensor::leaf(&[rows, cols], v.to_vec(), grad).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let a = mat(2, 2, &[1.0, 2.0, 3.0, 4.0], false);
        let b = mat(2, 1, &[1.0, 1.0], false);
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_identity_is_noop() {
        let eye = mat(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], false);
        let p = mat(2, 3, &[0.5, -1.0, 2.0, 3.0, 0.25, -7.0], false);
        assert_eq!(eye.matmul(&p.reshape(&[3, 2]).unwrap()).unwrap().data(), p.data());
        assert_eq!(p.matmul(&eye).unwrap().data(), p.data());
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = mat(2, 3, &[0.0; 6], false);
        let b = mat(2, 3, &[0.0; 6], false);
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn max_pool_examples() {
        let x = mat(2, 2, &[1.0, 5.0, 3.0, 2.0], false);
        assert_eq!(x.max_pool_points().unwrap().data(), &[3.0, 5.0]);
        let one = mat(1, 3, &[4.0, -1.0, 0.5], false);
        assert_eq!(one.max_pool_points().unwrap().data(), one.data());
        let empty = Tensor::leaf(&[0, 3], vec![], false).unwrap();
        assert!(matches!(empty.max_pool_points(), Err(Error::Empty(_))));
    }

    #[test]
    fn max_pool_ties_route_to_lowest_row() {
        let x = mat(3, 1, &[2.0, 2.0, 1.0], true);
        x.max_pool_points().unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn tile_and_concat_examples() {
        let v = Tensor::constant(&[2], vec![1.0, 2.0]).unwrap();
        assert_eq!(v.tile_rows(3).unwrap().data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let x = mat(2, 1, &[1.0, 2.0], false);
        let y = Tensor::concat_cols(std::slice::from_ref(&x)).unwrap();
        assert_eq!(y.data(), x.data());
        let z = mat(3, 1, &[0.0; 3], false);
        assert!(Tensor::concat_cols(&[x, z]).is_err());
    }

    #[test]
    fn repeat_rows_interleaves() {
        let x = mat(2, 2, &[1.0, 2.0, 3.0, 4.0], false);
        let y = x.repeat_rows(2).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let x = Tensor::constant(&[1], vec![f64::MAX]).unwrap();
        assert!(matches!(x.scale(10.0), Err(Error::NonFinite(_))));
        assert!(Tensor::constant(&[1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn backward_twice_is_an_error_until_reset() {
        let x = mat(1, 1, &[3.0], true);
        let y = x.mul(&x).unwrap().sum().unwrap();
        y.backward().unwrap();
        assert!(matches!(y.backward(), Err(Error::BackwardTwice)));
        y.reset_backward();
        y.backward().unwrap();
        // two sweeps accumulate on the leaf
        assert_eq!(x.grad().unwrap(), vec![12.0]);
    }

    #[test]
    fn shared_subexpression_gradients_sum() {
        // f = (x*y) + (x*y)*x with x=2, y=3 reuses u = x*y.
        let x = mat(1, 1, &[2.0], true);
        let y = mat(1, 1, &[3.0], true);
        let u = x.mul(&y).unwrap();
        let f = u.add(&u.mul(&x).unwrap()).unwrap().sum().unwrap();
        f.backward().unwrap();
        // Unrolled tree: f = x*y + x*x*y, df/dx = y + 2xy, df/dy = x + x^2.
        assert_eq!(x.grad().unwrap(), vec![3.0 + 2.0 * 2.0 * 3.0]);
        assert_eq!(y.grad().unwrap(), vec![2.0 + 4.0]);
    }

    #[test]
    fn shared_mlp_zero_layer_and_identity() {
        let x = mat(4, 3, &[0.3, -0.2, 0.9, 1.0, 2.0, -3.0, 0.0, 0.5, 0.5, -1.0, 1.0, 0.1], false);
        let w = Tensor::zeros(&[3, 5]);
        let b = Tensor::zeros(&[5]);
        let (y, _) = shared_mlp_layer(&x, &w, &b, Activation::Relu, Norm::None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let p = mat(1, 3, &[0.25, -4.0, 7.5], false);
        let eye = mat(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], false);
        let (y, _) =
            shared_mlp_layer(&p, &eye, &Tensor::zeros(&[3]), Activation::None, Norm::None).unwrap();
        assert_eq!(y.data(), p.data());
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = mat(1, 2, &[1.0, 2.0], true);
        let y = no_grad(|| x.scale(2.0).unwrap());
        assert!(!y.requires_grad());
    }

    #[test]
    fn batch_norm_single_row_gives_beta() {
        let x = mat(1, 2, &[5.0, -3.0], false);
        let gamma = Tensor::constant(&[2], vec![1.0, 2.0]).unwrap();
        let beta = Tensor::constant(&[2], vec![0.5, -0.5]).unwrap();
        let (y, mean, var) = x.batch_norm_train(&gamma, &beta, BN_EPS).unwrap();
        assert_eq!(y.data(), &[0.5, -0.5]);
        assert_eq!(mean, vec![5.0, -3.0]);
        assert_eq!(var, vec![0.0, 0.0]);
    }
}
