//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] owns every value produced during one forward pass. [`Var`] is a
//! cheap handle (tape reference + node index). Nodes whose inputs are all
//! constants are stored as constants and carry no backward rule, so the same
//! kernels serve both training and inference.
//!
//! Tensors are at most rank 2 for every kernel except the elementwise ones.
//! Rank-1 tensors of extent `n` behave as `1 x n` row vectors. Axis
//! reductions on rank-2 inputs keep the reduced axis with extent 1; on rank-1
//! inputs they produce a rank-0 scalar.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                kernel: "tensor",
                detail: format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![0.0; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a `rows.len() x d` matrix; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape { kernel: "from_rows", detail: "ragged rows".into() });
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// `(rows, cols)` view; rank 0 is `1 x 1`, rank 1 is a row vector.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [] => Some((1, 1)),
            [n] => Some((1, *n)),
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map_or(0, |d| d.0)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map_or(0, |d| d.1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Plain (tape-free) `self * rhs` for rank-2 operands.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(rhs, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", &[self, rhs]));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &rhs.data, false, &mut out, 0.0);
        Tensor::matrix(m, n, out)
    }
}

fn dims2(t: &Tensor, kernel: &'static str) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| Error::Shape {
        kernel,
        detail: format!("expected rank <= 2, got {:?}", t.shape),
    })
}

fn shape_err(kernel: &'static str, inputs: &[&Tensor]) -> Error {
    let shapes: Vec<_> = inputs.iter().map(|t| t.shape.clone()).collect();
    Error::Shape { kernel, detail: format!("incompatible shapes {shapes:?}") }
}

/// `c = a' * b' + beta * c` where `'` optionally transposes. `a'` is `m x k`,
/// `b'` is `k x n`, both stored row-major before transposition.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices cover the strided extents implied by (m, k, n) and the
    // transposition flags; callers check the shapes before calling.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, w: usize, b: usize },
    Relu(usize),
    Tanh(usize),
    SumAxis { x: usize, axis: usize },
    SumAll(usize),
    Mean(usize),
    Square(usize),
    LogSumExp { x: usize, axis: usize },
    Neg(usize),
    Scale(usize, f64),
    Concat(Vec<usize>),
    GatherSum { x: usize, groups: Rc<[Vec<usize>]> },
    SegmentLogSumExp { x: usize, offsets: Rc<[usize]> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value())
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

    /// Registers a trainable leaf (`requires_grad = true`).
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    /// Leaves that a root does not depend on report zeros.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        if !std::ptr::eq(var.tape, self) {
            return None;
        }
        let nodes = self.nodes.borrow();
        let node = nodes.get(var.id)?;
        if !matches!(node.op, Op::Leaf) {
            return None;
        }
        let shape = node.value.shape.clone();
        let grads = self.leaf_grads.borrow();
        let data = match grads.get(var.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => vec![0.0; node.value.numel()],
        };
        Some(Tensor { shape, data })
    }

    pub fn zero_grads(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Accumulates `d root / d leaf` into every trainable leaf.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::ForeignTape);
        }
        let nodes = self.nodes.borrow();
        let root_node = nodes.get(root.id).ok_or(Error::ForeignTape)?;
        let rs = &root_node.value.shape;
        if !(rs.is_empty() || rs.as_slice() == [1]) {
            return Err(Error::NonScalarRoot(rs.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        if root_node.requires_grad {
            grads[root.id] = Some(vec![1.0]);
        }
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize(nodes.len(), None);
        }
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let mut send = |target: usize, delta: Vec<f64>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot => *slot = Some(delta),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    match &mut leaf_grads[id] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                        slot => *slot = Some(g),
                    }
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (m, k) = val(*a).dims2().unwrap();
                    let n = val(*b).cols();
                    if nodes[*a].requires_grad {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &g, false, &val(*b).data, true, &mut da, 0.0);
                        send(*a, da);
                    }
                    if nodes[*b].requires_grad {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, &val(*a).data, true, &g, false, &mut db, 0.0);
                        send(*b, db);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|v| -v).collect());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.iter().zip(&val(*b).data).map(|(g, y)| g * y).collect();
                    let db = g.iter().zip(&val(*a).data).map(|(g, x)| g * x).collect();
                    send(*a, da);
                    send(*b, db);
                }
                Op::Affine { x, w, b } => {
                    let (r, i) = val(*x).dims2().unwrap();
                    let o = val(*w).cols();
                    if nodes[*x].requires_grad {
                        let mut dx = vec![0.0; r * i];
                        gemm(r, o, i, &g, false, &val(*w).data, true, &mut dx, 0.0);
                        send(*x, dx);
                    }
                    if nodes[*w].requires_grad {
                        let mut dw = vec![0.0; i * o];
                        gemm(i, r, o, &val(*x).data, true, &g, false, &mut dw, 0.0);
                        send(*w, dw);
                    }
                    if nodes[*b].requires_grad {
                        let mut db = vec![0.0; o];
                        for row in g.chunks(o) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        send(*b, db);
                    }
                }
                Op::Relu(x) => {
                    let dx = g
                        .iter()
                        .zip(&val(*x).data)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    send(*x, dx);
                }
                Op::Tanh(x) => {
                    let dx = g.iter().zip(&node.value.data).map(|(g, y)| g * (1.0 - y * y)).collect();
                    send(*x, dx);
                }
                Op::SumAxis { x, axis } => {
                    let xv = val(*x);
                    let (r, c) = xv.dims2().unwrap();
                    let dx = broadcast_back(&g, r, c, *axis, xv.shape.len());
                    send(*x, dx);
                }
                Op::SumAll(x) => {
                    send(*x, vec![g[0]; val(*x).numel()]);
                }
                Op::Mean(x) => {
                    let n = val(*x).numel() as f64;
                    send(*x, vec![g[0] / n; val(*x).numel()]);
                }
                Op::Square(x) => {
                    let dx = g.iter().zip(&val(*x).data).map(|(g, v)| 2.0 * g * v).collect();
                    send(*x, dx);
                }
                Op::LogSumExp { x, axis } => {
                    let xv = val(*x);
                    let (r, c) = xv.dims2().unwrap();
                    let out = broadcast_back(&node.value.data, r, c, *axis, xv.shape.len());
                    let gb = broadcast_back(&g, r, c, *axis, xv.shape.len());
                    let dx = xv
                        .data
                        .iter()
                        .zip(&out)
                        .zip(&gb)
                        .map(|((v, o), g)| g * (v - o).exp())
                        .collect();
                    send(*x, dx);
                }
                Op::Neg(x) => send(*x, g.iter().map(|v| -v).collect()),
                Op::Scale(x, s) => send(*x, g.iter().map(|v| v * s).collect()),
                Op::Concat(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let c = val(p).cols();
                        if nodes[p].requires_grad {
                            let mut dp = Vec::with_capacity(rows * c);
                            for row in 0..rows {
                                let start = row * total + offset;
                                dp.extend_from_slice(&g[start..start + c]);
                            }
                            send(p, dp);
                        }
                        offset += c;
                    }
                }
                Op::GatherSum { x, groups } => {
                    let xv = val(*x);
                    let c = xv.cols();
                    let mut dx = vec![0.0; xv.numel()];
                    for (out_row, members) in groups.iter().enumerate() {
                        let grow = &g[out_row * c..(out_row + 1) * c];
                        for &m in members {
                            dx[m * c..(m + 1) * c].iter_mut().zip(grow).for_each(|(d, v)| *d += v);
                        }
                    }
                    send(*x, dx);
                }
                Op::SegmentLogSumExp { x, offsets } => {
                    let xv = val(*x);
                    let mut dx = vec![0.0; xv.numel()];
                    for (s, w) in offsets.windows(2).enumerate() {
                        let out = node.value.data[s];
                        for i in w[0]..w[1] {
                            dx[i] = g[s] * (xv.data[i] - out).exp();
                        }
                    }
                    send(*x, dx);
                }
            }
        }
        Ok(())
    }
}

/// Expands a reduced gradient back to the `r x c` input layout.
fn broadcast_back(g: &[f64], r: usize, c: usize, axis: usize, rank: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            let idx = match (rank, axis) {
                (0 | 1, _) => 0,
                (_, 0) => j,
                _ => i,
            };
            out.push(g[idx]);
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape.clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::ForeignTape)
        }
    }

    fn emit(&self, kernel: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'t>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { kernel });
        }
        let rg = inputs.iter().any(|&i| self.tape.requires_grad(i));
        let op = if rg { op } else { Op::Constant };
        Ok(self.tape.push(value, op, rg))
    }

    pub fn matmul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let out = self.value().matmul(&rhs.value())?;
        self.emit("matmul", out, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id])
    }

    fn zip_with(
        &self,
        rhs: Var<'t>,
        kernel: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let (a, b) = (self.value(), rhs.value());
        if a.shape != b.shape {
            return Err(shape_err(kernel, &[&a, &b]));
        }
        let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor { shape: a.shape.clone(), data };
        self.emit(kernel, out, op, &[self.id, rhs.id])
    }

    pub fn add(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(rhs, "add", |x, y| x + y, Op::Add(self.id, rhs.id))
    }

    pub fn sub(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(rhs, "sub", |x, y| x - y, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(rhs, "mul", |x, y| x * y, Op::Mul(self.id, rhs.id))
    }

    /// `self * weight + bias`, with `bias` a `1 x out` row (or rank-1 `out`)
    /// broadcast over rows.
    pub fn affine(&self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&weight)?;
        self.same_tape(&bias)?;
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (r, i) = dims2(&x, "affine")?;
        let (i2, o) = dims2(&w, "affine")?;
        if i != i2 || b.numel() != o || b.shape.len() > 2 || b.rows() != 1 {
            return Err(shape_err("affine", &[&x, &w, &b]));
        }
        let mut data = Vec::with_capacity(r * o);
        for _ in 0..r {
            data.extend_from_slice(&b.data);
        }
        gemm(r, i, o, &x.data, false, &w.data, false, &mut data, 1.0);
        let out = Tensor { shape: vec![r, o], data };
        self.emit(
            "affine",
            out,
            Op::Affine { x: self.id, w: weight.id, b: bias.id },
            &[self.id, weight.id, bias.id],
        )
    }

    fn map(&self, kernel: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>> {
        let v = self.value();
        let out = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|x| f(*x)).collect() };
        self.emit(kernel, out, op, &[self.id])
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.map("relu", |x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.map("tanh", f64::tanh, Op::Tanh(self.id))
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.map("square", |x| x * x, Op::Square(self.id))
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.map("neg", |x| -x, Op::Neg(self.id))
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        self.map("scale", |x| x * s, Op::Scale(self.id, s))
    }

    fn reduce(&self, kernel: &'static str, axis: usize) -> Result<(Rc<Tensor>, usize, usize, Vec<usize>)> {
        let v = self.value();
        let (r, c) = dims2(&v, kernel)?;
        let rank = v.shape.len();
        if rank == 0 || axis >= rank {
            return Err(Error::Shape { kernel, detail: format!("axis {axis} out of range for {:?}", v.shape) });
        }
        let shape = match (rank, axis) {
            (1, _) => vec![],
            (_, 0) => vec![1, c],
            _ => vec![r, 1],
        };
        Ok((v, r, c, shape))
    }

    /// Groups of the flat data that a reduction over `axis` collapses.
    fn lanes(v: &Tensor, r: usize, c: usize, axis: usize) -> Vec<Vec<f64>> {
        if v.shape.len() <= 1 {
            return vec![v.data.clone()];
        }
        if axis == 0 {
            (0..c).map(|j| (0..r).map(|i| v.data[i * c + j]).collect()).collect()
        } else {
            (0..r).map(|i| v.data[i * c..(i + 1) * c].to_vec()).collect()
        }
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let (v, r, c, shape) = self.reduce("sum_axis", axis)?;
        let data = Self::lanes(&v, r, c, axis).iter().map(|l| l.iter().sum()).collect();
        self.emit("sum_axis", Tensor { shape, data }, Op::SumAxis { x: self.id, axis }, &[self.id])
    }

    pub fn logsumexp(&self, axis: usize) -> Result<Var<'t>> {
        let (v, r, c, shape) = self.reduce("logsumexp", axis)?;
        let data = Self::lanes(&v, r, c, axis).iter().map(|l| logsumexp(l)).collect();
        self.emit("logsumexp", Tensor { shape, data }, Op::LogSumExp { x: self.id, axis }, &[self.id])
    }

    /// Minimum over `axis`. The result is a constant: no gradient flows
    /// through the selection.
    pub fn min_axis(&self, axis: usize) -> Result<Var<'t>> {
        let (v, r, c, shape) = self.reduce("min_axis", axis)?;
        let data = Self::lanes(&v, r, c, axis)
            .iter()
            .map(|l| l.iter().copied().fold(f64::INFINITY, f64::min))
            .collect();
        Ok(self.tape.constant(Tensor { shape, data }))
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let v = self.value();
        let out = Tensor::scalar(v.data.iter().sum());
        self.emit("sum", out, Op::SumAll(self.id), &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let v = self.value();
        if v.numel() == 0 {
            return Err(Error::Shape { kernel: "mean", detail: "empty tensor".into() });
        }
        let out = Tensor::scalar(v.data.iter().sum::<f64>() / v.numel() as f64);
        self.emit("mean", out, Op::Mean(self.id), &[self.id])
    }

    /// Concatenates rank-2 tensors with equal row counts along the last axis.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::Shape { kernel: "concat", detail: "no inputs".into() })?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        for p in parts {
            first.same_tape(p)?;
        }
        let rows = dims2(&values[0], "concat")?.0;
        let mut cols = 0;
        for v in &values {
            let (r, c) = dims2(v, "concat")?;
            if r != rows || v.shape.len() != 2 {
                let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
                return Err(shape_err("concat", &refs));
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(i));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        first.emit("concat", Tensor { shape: vec![rows, cols], data }, Op::Concat(ids.clone()), &ids)
    }

    /// Row `i` of the output is the sum of the input rows listed in
    /// `groups[i]` (zero for an empty group). Covers gathers and segment sums.
    pub fn gather_sum(&self, groups: Rc<[Vec<usize>]>) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = dims2(&v, "gather_sum")?;
        if v.shape.len() != 2 {
            return Err(shape_err("gather_sum", &[&v]));
        }
        let mut data = vec![0.0; groups.len() * c];
        for (i, members) in groups.iter().enumerate() {
            let out = &mut data[i * c..(i + 1) * c];
            for &m in members {
                if m >= r {
                    return Err(Error::Shape {
                        kernel: "gather_sum",
                        detail: format!("row {m} out of range for {:?}", v.shape),
                    });
                }
                out.iter_mut().zip(v.row(m)).for_each(|(o, x)| *o += x);
            }
        }
        let out = Tensor { shape: vec![groups.len(), c], data };
        self.emit("gather_sum", out, Op::GatherSum { x: self.id, groups }, &[self.id])
    }

    /// Picks rows by index.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let groups: Rc<[Vec<usize>]> = idx.iter().map(|&i| vec![i]).collect();
        self.gather_sum(groups)
    }

    /// Log-sum-exp over contiguous segments `offsets[s]..offsets[s+1]` of an
    /// `m x 1` column. Output is `S x 1`.
    pub fn segment_logsumexp(&self, offsets: Rc<[usize]>) -> Result<Var<'t>> {
        let v = self.value();
        check_segments("segment_logsumexp", &v, &offsets)?;
        let data: Vec<f64> = offsets.windows(2).map(|w| logsumexp(&v.data[w[0]..w[1]])).collect();
        let out = Tensor { shape: vec![data.len(), 1], data };
        self.emit("segment_logsumexp", out, Op::SegmentLogSumExp { x: self.id, offsets }, &[self.id])
    }

    /// Segment minimum broadcast back to every row of its segment. Constant.
    pub fn segment_min(&self, offsets: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        check_segments("segment_min", &v, offsets)?;
        let mut data = vec![0.0; v.numel()];
        for w in offsets.windows(2) {
            let m = v.data[w[0]..w[1]].iter().copied().fold(f64::INFINITY, f64::min);
            data[w[0]..w[1]].iter_mut().for_each(|d| *d = m);
        }
        Ok(self.tape.constant(Tensor { shape: v.shape.clone(), data }))
    }

    /// Same value, no gradient.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value().as_ref().clone())
    }
}

fn check_segments(kernel: &'static str, v: &Tensor, offsets: &[usize]) -> Result<()> {
    let ok_shape = v.shape.len() == 2 && v.shape[1] == 1;
    let ok_offsets = offsets.first() == Some(&0)
        && offsets.last() == Some(&v.numel())
        && offsets.windows(2).all(|w| w[0] < w[1]);
    if ok_shape && ok_offsets {
        Ok(())
    } else {
        Err(Error::Shape { kernel, detail: format!("shape {:?} with offsets {offsets:?}", v.shape) })
    }
}

/// Max-shifted log-sum-exp. Empty input gives `-inf`.
pub fn logsumexp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences. Returns the largest `|analytic - numeric| / max(1, |numeric|)`
/// over every coordinate of every input.
pub fn grad_check_many<F>(f: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::Config(format!("finite-difference step {step} outside [1e-7, 1e-3]")));
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = points.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| tape.grad(*v).expect("leaf")).collect();

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = pts.iter().map(|p| tape.constant(p.clone())).collect();
        let v = f(&tape, &vars)?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { kernel: "grad_check" })
        }
    };

    let mut worst = 0.0f64;
    let mut pts = points.to_vec();
    for t in 0..pts.len() {
        for i in 0..pts[t].numel() {
            let orig = pts[t].data[i];
            pts[t].data[i] = orig + step;
            let up = eval(&pts)?;
            pts[t].data[i] = orig - step;
            let down = eval(&pts)?;
            pts[t].data[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = (analytic[t].data[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn logsumexp_of_zeros_is_ln2() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = x.logsumexp(0).unwrap();
        assert!((y.item() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(y.shape(), Vec::<usize>::new());
    }

    #[test]
    fn logsumexp_is_max_shifted() {
        // 1000 + ln 2, exact to double precision (checked with mpmath at 50 digits)
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let y = x.logsumexp(0).unwrap().item();
        assert_eq!(y, 1000.693_147_180_559_9);
    }

    #[test]
    fn relu_clamps_negatives() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 2.0]));
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 2.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let root = x.mul(x).unwrap().sum().unwrap();
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.0, 0.0]));
        let root = x.logsumexp(0).unwrap();
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.5]));
        let root = x.square().unwrap().sum().unwrap();
        tape.backward(root).unwrap();
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
        tape.zero_grads();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn unused_leaf_has_zero_grad() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.param(Tensor::vector(vec![5.0]));
        let root = x.sum().unwrap();
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(unused).unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn root_from_another_tape_is_rejected() {
        let a = Tape::new();
        let b = Tape::new();
        let x = a.param(Tensor::scalar(1.0));
        assert!(matches!(b.backward(x), Err(Error::ForeignTape)));
    }

    #[test]
    fn shape_mismatch_names_kernel() {
        let tape = Tape::new();
        let a = tape.constant(t(vec![2, 3], vec![0.0; 6]));
        let b = tape.constant(t(vec![2, 3], vec![0.0; 6]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn overflow_is_an_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1e200]));
        assert!(matches!(a.square(), Err(Error::NonFinite { kernel: "square" })));
    }

    #[test]
    fn min_axis_is_detached() {
        let tape = Tape::new();
        let x = tape.param(t(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]));
        let m = x.min_axis(1).unwrap();
        assert_eq!(m.value().data(), &[-2.0, 0.5]);
        assert!(!m.requires_grad());
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = grad_check(|tape, _x| Ok(tape.constant(Tensor::scalar(3.0))), &Tensor::vector(vec![1.0, 2.0]), 1e-5)
            .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        let err = grad_check(|_, x| x.square()?.sum(), &Tensor::vector(vec![1.0, 2.0]), 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn step_out_of_range_is_rejected() {
        assert!(grad_check(|_, x| x.sum(), &Tensor::scalar(1.0), 1e-2).is_err());
    }

    fn rand_tensor(rows: usize, cols: usize, seed: &[f64]) -> Tensor {
        let data = (0..rows * cols).map(|i| seed[i % seed.len()] * (1.0 + 0.13 * i as f64).sin()).collect();
        t(vec![rows, cols], data)
    }

    /// Each kernel is composed with a fixed random projection so the checked
    /// function is scalar and every output coordinate matters.
    fn project<'t>(tape: &'t Tape, y: Var<'t>) -> Result<Var<'t>> {
        let v = y.value();
        let w: Vec<f64> = (0..v.numel()).map(|i| ((i as f64) * 0.7 + 0.3).cos()).collect();
        let w = tape.constant(Tensor::new(v.shape().to_vec(), w)?);
        y.mul(w)?.sum()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn kernels_match_finite_differences(seed in proptest::collection::vec(-2.0f64..2.0, 12)) {
            let a = rand_tensor(3, 4, &seed);
            let b = rand_tensor(4, 2, &seed[3..]);
            let bias = rand_tensor(1, 2, &seed[5..]);
            let c = rand_tensor(3, 4, &seed[7..]);
            let offsets: Rc<[usize]> = vec![0, 1, 4, 6].into();
            let groups: Rc<[Vec<usize>]> = vec![vec![0, 2], vec![], vec![1, 1, 2]].into();
            let step = 1e-6;
            let tol = 1e-6;

            let checks: Vec<f64> = vec![
                grad_check_many(|tp, v| project(tp, v[0].matmul(v[1])?), &[a.clone(), b.clone()], step).unwrap(),
                grad_check_many(|tp, v| project(tp, v[0].affine(v[1], v[2])?), &[a.clone(), b.clone(), bias.clone()], step).unwrap(),
                grad_check_many(|tp, v| project(tp, v[0].add(v[1])?), &[a.clone(), c.clone()], step).unwrap(),
                grad_check_many(|tp, v| project(tp, v[0].sub(v[1])?), &[a.clone(), c.clone()], step).unwrap(),
                grad_check_many(|tp, v| project(tp, v[0].mul(v[1])?), &[a.clone(), c.clone()], step).unwrap(),
                grad_check(|tp, x| project(tp, x.tanh()?), &a, step).unwrap(),
                grad_check(|tp, x| project(tp, x.square()?), &a, step).unwrap(),
                grad_check(|tp, x| project(tp, x.neg()?.scale(1.7)?), &a, step).unwrap(),
                grad_check(|tp, x| project(tp, x.sum_axis(0)?), &a, step).unwrap(),
                grad_check(|tp, x| project(tp, x.sum_axis(1)?), &a, step).unwrap(),
                grad_check(|tp, x| project(tp, x.logsumexp(0)?), &a, step).unwrap(),
                grad_check(|tp, x| project(tp, x.logsumexp(1)?), &a, step).unwrap(),
                grad_check(|_, x| x.mean(), &a, step).unwrap(),
                grad_check_many(|tp, v| project(tp, Var::concat(&[v[0], v[1]])?), &[a.clone(), c.clone()], step).unwrap(),
                grad_check(|tp, x| project(tp, x.gather_sum(groups.clone())?), &a, step).unwrap(),
                grad_check(|tp, x| {
                    let col = x.gather_rows(&[0, 1, 2])?.sum_axis(1)?; // 3 x 1
                    let six = col.gather_rows(&[0, 1, 2, 0, 2, 1])?;
                    project(tp, six.segment_logsumexp(offsets.clone())?)
                }, &a, step).unwrap(),
            ];
            for (i, err) in checks.iter().enumerate() {
                prop_assert!(*err < tol, "kernel #{} error {}", i, err);
            }
        }

        #[test]
        fn relu_matches_finite_differences_away_from_kink(seed in proptest::collection::vec(0.05f64..2.0, 6), signs in proptest::collection::vec(any::<bool>(), 6)) {
            let data: Vec<f64> = seed.iter().zip(&signs).map(|(v, s)| if *s { *v } else { -*v }).collect();
            let x = Tensor::matrix(2, 3, data).unwrap();
            let err = grad_check(|tp, x| project(tp, x.relu()?), &x, 1e-6).unwrap();
            prop_assert!(err < 1e-6);
        }

        #[test]
        fn logsumexp_shift_identity(xs in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
            let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let shifted: Vec<f64> = xs.iter().map(|x| x - m).collect();
            prop_assert!((logsumexp(&xs) - (logsumexp(&shifted) + m)).abs() < 1e-12);
        }
    }
}
