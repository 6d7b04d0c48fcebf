//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its nodes during a forward
//! pass. [`Tape::backward`] then walks the record in reverse and accumulates
//! gradients for every node that (transitively) depends on a leaf created with
//! [`Tape::leaf`]. Nodes created with [`Tape::constant`] never receive
//! gradients and prune the backward walk.
//!
//! Layout is row-major. There is no implicit broadcasting; the few
//! row-broadcasting operations (`add_bias`, `scale_rows`, `lerp_rows`) are
//! explicit and carry their own gradient rules.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index range {start}..{end} out of bounds for extent {extent}")]
    Range {
        op: &'static str,
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("{0}: empty operand list")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, NumError>;

/// Dense row-major array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(NumError::Shape {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a matrix; a vector is treated as one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => {
                let cols = *other.last().unwrap_or(&1);
                (self.data.len() / cols.max(1), cols)
            }
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Matrix product without a tape.
pub fn matmul_plain(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims("matmul", a)?;
    let (k2, n) = matrix_dims("matmul", b)?;
    if k != k2 {
        return Err(NumError::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, Layout::Normal, &b.data, Layout::Normal, &mut out);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Row-wise numerically stable log-softmax without a tape.
pub fn log_softmax_plain(x: &Tensor) -> Tensor {
    let (rows, cols) = x.dims2();
    let mut out = x.data.clone();
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v = *v - max - lse;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        _ => Err(NumError::Rank {
            op,
            expected: 2,
            shape: t.shape.clone(),
        }),
    }
}

#[derive(Clone, Copy)]
enum Layout {
    Normal,
    Transposed,
}

/// `out += op(a) * op(b)` where `op(a)` is m×k and `op(b)` is k×n.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, out: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = match la {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: the strides describe exactly the m×k, k×n and m×n row-major
    // buffers whose lengths are checked by every caller.
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
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    LogSoftmax(NodeId),
    AddBias(NodeId, NodeId),
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize },
    ConcatRows(Vec<NodeId>),
    RowDot(NodeId, NodeId),
    ScaleRows { x: NodeId, col: NodeId },
    LerpRows { a: NodeId, b: NodeId, w: Vec<f64> },
    Sum(NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::RowDot(a, b) => vec![*a, *b],
            Op::ScaleRows { x, col } => vec![*x, *col],
            Op::LerpRows { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::LogSoftmax(x)
            | Op::Sum(x)
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. } => vec![*x],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// One tape per training step; drop it after [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or zeros shaped like `like` when the loss does not
    /// depend on it.
    pub fn get_or_zeros(&self, id: NodeId, like: &[usize]) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.push(op, value, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NumError::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul_plain(self.value(a), self.value(b))?;
        Ok(self.record(Op::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip(self.value(b), |x, y| x + y);
        Ok(self.record(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip(self.value(b), |x, y| x - y);
        Ok(self.record(Op::Sub(a, b), value))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip(self.value(b), |x, y| x * y);
        Ok(self.record(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = self.value(x).map(|v| v * factor);
        self.record(Op::Scale(x, factor), value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(sigmoid);
        self.record(Op::Sigmoid(x), value)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::tanh);
        self.record(Op::Tanh(x), value)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::exp);
        self.record(Op::Exp(x), value)
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if t.shape.last().copied().unwrap_or(0) == 0 {
            return Err(NumError::Rank {
                op: "log_softmax",
                expected: 1,
                shape: t.shape.clone(),
            });
        }
        let value = log_softmax_plain(t);
        Ok(self.record(Op::LogSoftmax(x), value))
    }

    /// Adds a length-n bias vector to every row of an m×n matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (rows, cols) = matrix_dims("add_bias", self.value(x))?;
        let b = self.value(bias);
        if b.len() != cols {
            return Err(NumError::Shape {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: b.shape.clone(),
            });
        }
        let mut data = self.value(x).data.clone();
        for r in 0..rows {
            for (v, bv) in data[r * cols..(r + 1) * cols].iter_mut().zip(&b.data) {
                *v += bv;
            }
        }
        let value = Tensor {
            shape: vec![rows, cols],
            data,
        };
        Ok(self.record(Op::AddBias(x, bias), value))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = matrix_dims("slice_cols", self.value(x))?;
        if start + len > cols {
            return Err(NumError::Range {
                op: "slice_cols",
                start,
                end: start + len,
                extent: cols,
            });
        }
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor {
            shape: vec![rows, len],
            data,
        };
        Ok(self.record(Op::SliceCols { x, start }, value))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs.first().ok_or(NumError::Empty("concat_cols"))?;
        let (rows, _) = matrix_dims("concat_cols", self.value(first))?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = matrix_dims("concat_cols", self.value(x))?;
            if r != rows {
                return Err(NumError::Shape {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: self.shape(x).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor {
            shape: vec![rows, total],
            data,
        };
        Ok(self.record(Op::ConcatCols(xs.to_vec()), value))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = matrix_dims("slice_rows", self.value(x))?;
        if start + len > rows {
            return Err(NumError::Range {
                op: "slice_rows",
                start,
                end: start + len,
                extent: rows,
            });
        }
        let data = self.value(x).data[start * cols..(start + len) * cols].to_vec();
        let value = Tensor {
            shape: vec![len, cols],
            data,
        };
        Ok(self.record(Op::SliceRows { x, start }, value))
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs.first().ok_or(NumError::Empty("concat_rows"))?;
        let (_, cols) = matrix_dims("concat_rows", self.value(first))?;
        let mut rows = 0;
        for &x in xs {
            let (r, c) = matrix_dims("concat_rows", self.value(x))?;
            if c != cols {
                return Err(NumError::Shape {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: self.shape(x).to_vec(),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &x in xs {
            data.extend_from_slice(&self.value(x).data);
        }
        let value = Tensor {
            shape: vec![rows, cols],
            data,
        };
        Ok(self.record(Op::ConcatRows(xs.to_vec()), value))
    }

    /// Per-row inner product of two m×n matrices, giving m×1.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("row_dot", a, b)?;
        let (rows, cols) = matrix_dims("row_dot", self.value(a))?;
        let (va, vb) = (&self.value(a).data, &self.value(b).data);
        let data = (0..rows)
            .map(|r| {
                va[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&vb[r * cols..(r + 1) * cols])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let value = Tensor {
            shape: vec![rows, 1],
            data,
        };
        Ok(self.record(Op::RowDot(a, b), value))
    }

    /// Multiplies row r of an m×n matrix by entry r of an m×1 column.
    pub fn scale_rows(&mut self, x: NodeId, col: NodeId) -> Result<NodeId> {
        let (rows, cols) = matrix_dims("scale_rows", self.value(x))?;
        if self.shape(col) != [rows, 1] {
            return Err(NumError::Shape {
                op: "scale_rows",
                left: self.shape(x).to_vec(),
                right: self.shape(col).to_vec(),
            });
        }
        let c = &self.value(col).data;
        let mut data = self.value(x).data.clone();
        for r in 0..rows {
            for v in &mut data[r * cols..(r + 1) * cols] {
                *v *= c[r];
            }
        }
        let value = Tensor {
            shape: vec![rows, cols],
            data,
        };
        Ok(self.record(Op::ScaleRows { x, col }, value))
    }

    /// Row-wise `w[r] * a + (1 - w[r]) * b` with constant weights.
    ///
    /// Weights of exactly 1 or 0 reproduce `a` or `b` bit-for-bit.
    pub fn lerp_rows(&mut self, a: NodeId, b: NodeId, w: &[f64]) -> Result<NodeId> {
        self.same_shape("lerp_rows", a, b)?;
        let (rows, cols) = matrix_dims("lerp_rows", self.value(a))?;
        if w.len() != rows {
            return Err(NumError::Shape {
                op: "lerp_rows",
                left: self.shape(a).to_vec(),
                right: vec![w.len()],
            });
        }
        let (va, vb) = (&self.value(a).data, &self.value(b).data);
        let mut data = Vec::with_capacity(rows * cols);
        for (r, &wr) in w.iter().enumerate() {
            for c in 0..cols {
                let i = r * cols + c;
                data.push(wr * va[i] + (1.0 - wr) * vb[i]);
            }
        }
        let value = Tensor {
            shape: vec![rows, cols],
            data,
        };
        Ok(self.record(
            Op::LerpRows {
                a,
                b,
                w: w.to_vec(),
            },
            value,
        ))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        self.record(Op::Sum(x), value)
    }

    /// Reverse accumulation from a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(NumError::NotScalar(loss_value.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(&loss_value.shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims2();
                let n = vb.dims2().1;
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, &g.data, Layout::Normal, &vb.data, Layout::Transposed, &mut da);
                    self.accumulate(grads, *a, Tensor { shape: va.shape.clone(), data: da });
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, &va.data, Layout::Transposed, &g.data, Layout::Normal, &mut db);
                    self.accumulate(grads, *b, Tensor { shape: vb.shape.clone(), data: db });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let da = g.zip(self.value(*b), |gv, bv| gv * bv);
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = g.zip(self.value(*a), |gv, av| gv * av);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(x, factor) => {
                let f = *factor;
                self.accumulate(grads, *x, g.map(|v| v * f));
            }
            Op::Sigmoid(x) => {
                let dx = g.zip(out, |gv, s| gv * s * (1.0 - s));
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let dx = g.zip(out, |gv, t| gv * (1.0 - t * t));
                self.accumulate(grads, *x, dx);
            }
            Op::Exp(x) => {
                let dx = g.zip(out, |gv, e| gv * e);
                self.accumulate(grads, *x, dx);
            }
            Op::LogSoftmax(x) => {
                // dx = g - softmax * rowsum(g)
                let (rows, cols) = out.dims2();
                let mut dx = g.data.clone();
                for r in 0..rows {
                    let gs: f64 = g.data[r * cols..(r + 1) * cols].iter().sum();
                    for c in 0..cols {
                        let i = r * cols + c;
                        dx[i] -= out.data[i].exp() * gs;
                    }
                }
                self.accumulate(grads, *x, Tensor { shape: out.shape.clone(), data: dx });
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*bias) {
                    let (rows, cols) = g.dims2();
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for (d, gv) in db.iter_mut().zip(&g.data[r * cols..(r + 1) * cols]) {
                            *d += gv;
                        }
                    }
                    let shape = self.shape(*bias).to_vec();
                    self.accumulate(grads, *bias, Tensor { shape, data: db });
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let (rows, cols) = self.value(*x).dims2();
                    let len = out.dims2().1;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g.data[r * len..(r + 1) * len]);
                    }
                    self.accumulate(grads, *x, Tensor { shape: vec![rows, cols], data: dx });
                }
            }
            Op::ConcatCols(xs) => {
                let (rows, total) = out.dims2();
                let mut offset = 0;
                for &x in xs {
                    let w = self.value(x).dims2().1;
                    if self.needs(x) {
                        let mut dx = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dx.extend_from_slice(&g.data[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, x, Tensor { shape: vec![rows, w], data: dx });
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs(*x) {
                    let (rows, cols) = self.value(*x).dims2();
                    let mut dx = vec![0.0; rows * cols];
                    dx[start * cols..start * cols + g.len()].copy_from_slice(&g.data);
                    self.accumulate(grads, *x, Tensor { shape: vec![rows, cols], data: dx });
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    if self.needs(x) {
                        let dx = g.data[offset..offset + n].to_vec();
                        let shape = self.shape(x).to_vec();
                        self.accumulate(grads, x, Tensor { shape, data: dx });
                    }
                    offset += n;
                }
            }
            Op::RowDot(a, b) => {
                let (rows, cols) = self.value(*a).dims2();
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if self.needs(this) {
                        let ov = &self.value(other).data;
                        let mut d = vec![0.0; rows * cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                d[r * cols + c] = g.data[r] * ov[r * cols + c];
                            }
                        }
                        self.accumulate(grads, this, Tensor { shape: vec![rows, cols], data: d });
                    }
                }
            }
            Op::ScaleRows { x, col } => {
                let (rows, cols) = out.dims2();
                let cv = &self.value(*col).data;
                if self.needs(*x) {
                    let mut dx = g.data.clone();
                    for r in 0..rows {
                        for v in &mut dx[r * cols..(r + 1) * cols] {
                            *v *= cv[r];
                        }
                    }
                    self.accumulate(grads, *x, Tensor { shape: vec![rows, cols], data: dx });
                }
                if self.needs(*col) {
                    let xv = &self.value(*x).data;
                    let dc = (0..rows)
                        .map(|r| {
                            (0..cols)
                                .map(|c| g.data[r * cols + c] * xv[r * cols + c])
                                .sum()
                        })
                        .collect();
                    self.accumulate(grads, *col, Tensor { shape: vec![rows, 1], data: dc });
                }
            }
            Op::LerpRows { a, b, w } => {
                let (_, cols) = out.dims2();
                if self.needs(*a) {
                    let mut da = g.data.clone();
                    for (r, chunk) in da.chunks_mut(cols).enumerate() {
                        chunk.iter_mut().for_each(|v| *v *= w[r]);
                    }
                    self.accumulate(grads, *a, Tensor { shape: out.shape.clone(), data: da });
                }
                if self.needs(*b) {
                    let mut db = g.data.clone();
                    for (r, chunk) in db.chunks_mut(cols).enumerate() {
                        chunk.iter_mut().for_each(|v| *v *= 1.0 - w[r]);
                    }
                    self.accumulate(grads, *b, Tensor { shape: out.shape.clone(), data: db });
                }
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::filled(&shape, g.data[0]));
            }
        }
    }
}

/// Relative error between analytic and central-difference gradients.
///
/// `f` builds a scalar loss on a fresh tape from the leaf it is given.
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F, E>(f: F, x: &Tensor, eps: f64) -> std::result::Result<f64, E>
where
    F: Fn(&mut Tape, NodeId) -> std::result::Result<NodeId, E>,
    E: From<NumError>,
{
    grad_check_many(|tape, ids| f(tape, ids[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F, E>(f: F, inputs: &[Tensor], eps: f64) -> std::result::Result<f64, E>
where
    F: Fn(&mut Tape, &[NodeId]) -> std::result::Result<NodeId, E>,
    E: From<NumError>,
{
    let eval = |values: &[Tensor]| -> std::result::Result<f64, E> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = f(&mut tape, &ids)?;
        let v = tape.value(loss);
        if v.len() != 1 {
            return Err(NumError::NotScalar(v.shape.clone()).into());
        }
        Ok(v.data[0])
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get_or_zeros(*id, inputs[k].shape());
        for i in 0..inputs[k].len() {
            let orig = probe[k].data[i];
            probe[k].data[i] = orig + eps;
            let up = eval(&probe)?;
            probe[k].data[i] = orig - eps;
            let down = eval(&probe)?;
            probe[k].data[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
