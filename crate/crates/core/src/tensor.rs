//! Dense row-major matrices and a reverse-mode gradient tape.
//!
//! Every differentiable computation in the crate is expressed as a sequence of
//! calls on a [`Tape`]. Each call records one operation together with the
//! handles of its inputs; [`Tape::backward`] replays the record in reverse and
//! accumulates gradients into every node that requires them.
//!
//! Vectors are `1 × n` row matrices. Node feature matrices hold one row per
//! node, and weight matrices are `d_in × d_out`, so a linear map is `H · W`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: expected a vector, got shape {shape:?}")]
    NotVector {
        op: &'static str,
        shape: (usize, usize),
    },
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("tensor data length {len} does not match shape {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense `rows × cols` matrix of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// A `1 × n` row vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::vector(vec![value])
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: (1, cols),
                    right: (1, row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Glorot-style uniform initialisation in `(-a, a)` with
    /// `a = sqrt(6 / (rows + cols))`.
    pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (rows + cols).max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_vector(&self) -> bool {
        self.rows == 1 || self.cols == 1
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Plain matrix product without recording anything.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        matmul_into(
            &self.data,
            &other.data,
            &mut out.data,
            self.rows,
            self.cols,
            other.cols,
        );
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    LeakyRelu(Var, f64),
    Softmax(Var),
    LogSumExp(Var),
    ConcatVec(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    MulRows(Var, Var),
    MeanRows(Var),
    Mean(Vec<Var>),
    Dot(Var, Var),
    Sum(Var),
    Dropout(Var, Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Record of operations for one forward/backward pass.
///
/// A tape is meant to live for a single training step; call [`Tape::clear`]
/// (or build a fresh one) before the next step.
#[derive(Debug, Default)]
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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Records a leaf value. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data,
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = &self.nodes[a.0].value;
        Tensor {
            rows: t.rows,
            cols: t.cols,
            data: t.data.iter().map(|x| f(*x)).collect(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = self.zip_map(a, b, |x, y| x / y);
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.map(a, |x| x * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data.iter().find(|x| **x <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        let out = self.map(a, f64::ln);
        Ok(self.push(out, Op::Log(a), &[a]))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data.iter().find(|x| **x < 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                msg: format!("negative input {bad}"),
            });
        }
        let out = self.map(a, f64::sqrt);
        Ok(self.push(out, Op::Sqrt(a), &[a]))
    }

    /// `x` for `x >= 0`, `slope * x` otherwise. The derivative at exactly 0 is 1.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.map(a, |x| if x >= 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    /// Softmax over every entry of a vector, with max subtraction.
    pub fn softmax(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        if !t.is_vector() {
            return Err(TensorError::NotVector {
                op: "softmax",
                shape: t.shape(),
            });
        }
        if t.is_empty() {
            return Err(TensorError::Domain {
                op: "softmax",
                msg: "empty vector".into(),
            });
        }
        let out = Tensor {
            rows: t.rows,
            cols: t.cols,
            data: softmax_slice(&t.data),
        };
        Ok(self.push(out, Op::Softmax(v), &[v]))
    }

    /// `log Σ exp(v_i)` over every entry, returned as a `1 × 1` tensor.
    pub fn logsumexp(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        if t.is_empty() {
            return Err(TensorError::Domain {
                op: "logsumexp",
                msg: "empty input".into(),
            });
        }
        let max = t.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = t.data.iter().map(|x| (x - max).exp()).sum();
        let out = Tensor::scalar(max + sum.ln());
        Ok(self.push(out, Op::LogSumExp(v), &[v]))
    }

    /// Concatenates vectors into one `1 × n` row vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if !t.is_vector() {
                return Err(TensorError::NotVector {
                    op: "concat",
                    shape: t.shape(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let out = Tensor::vector(data);
        Ok(self.push(out, Op::ConcatVec(parts.to_vec()), parts))
    }

    /// Horizontal concatenation of matrices sharing a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Domain {
                op: "concat_cols",
                msg: "no inputs".into(),
            });
        };
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(first),
                    right: self.shape(p),
                });
            }
        }
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor { rows, cols, data };
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(bad) = index.iter().find(|i| **i >= t.rows) {
            return Err(TensorError::Domain {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {:?}", t.shape()),
            });
        }
        let mut data = Vec::with_capacity(index.len() * t.cols);
        for &i in index {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor {
            rows: index.len(),
            cols: t.cols,
            data,
        };
        Ok(self.push(out, Op::GatherRows(a, index.to_vec()), &[a]))
    }

    /// Sums row `i` of `a` into output row `index[i]`; the output has `n_out` rows.
    pub fn scatter_add_rows(&mut self, a: Var, index: &[usize], n_out: usize) -> Result<Var> {
        let t = self.value(a);
        if index.len() != t.rows {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_add_rows",
                left: t.shape(),
                right: (index.len(), 1),
            });
        }
        if let Some(bad) = index.iter().find(|i| **i >= n_out) {
            return Err(TensorError::Domain {
                op: "scatter_add_rows",
                msg: format!("target row {bad} out of range for {n_out} rows"),
            });
        }
        let mut out = Tensor::zeros(n_out, t.cols);
        for (r, &dst) in index.iter().enumerate() {
            let src = t.row(r);
            for (o, s) in out.data[dst * t.cols..(dst + 1) * t.cols].iter_mut().zip(src) {
                *o += s;
            }
        }
        Ok(self.push(out, Op::ScatterAddRows(a, index.to_vec()), &[a]))
    }

    /// Softmax of an `E × 1` column taken separately within each group, where
    /// `group[i]` names the group of entry `i`.
    pub fn segment_softmax(&mut self, logits: Var, group: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.cols != 1 || t.rows != group.len() {
            return Err(TensorError::ShapeMismatch {
                op: "segment_softmax",
                left: t.shape(),
                right: (group.len(), 1),
            });
        }
        let n_groups = group.iter().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; n_groups];
        for (x, &g) in t.data.iter().zip(group) {
            max[g] = max[g].max(*x);
        }
        let mut sum = vec![0.0; n_groups];
        let mut data: Vec<f64> = t
            .data
            .iter()
            .zip(group)
            .map(|(x, &g)| {
                let e = (x - max[g]).exp();
                sum[g] += e;
                e
            })
            .collect();
        for (y, &g) in data.iter_mut().zip(group) {
            *y /= sum[g];
        }
        let out = Tensor {
            rows: t.rows,
            cols: 1,
            data,
        };
        Ok(self.push(out, Op::SegmentSoftmax(logits, group.to_vec()), &[logits]))
    }

    /// Scales row `i` of `a` by the scalar `w[i]`, with `w` an `E × 1` column.
    pub fn mul_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(w));
        if tw.cols != 1 || tw.rows != ta.rows {
            return Err(TensorError::ShapeMismatch {
                op: "mul_rows",
                left: ta.shape(),
                right: tw.shape(),
            });
        }
        let mut out = ta.clone();
        for r in 0..ta.rows {
            let s = tw.data[r];
            for x in &mut out.data[r * ta.cols..(r + 1) * ta.cols] {
                *x *= s;
            }
        }
        Ok(self.push(out, Op::MulRows(a, w), &[a, w]))
    }

    /// Column-wise mean over the rows, as a `1 × cols` vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rows == 0 {
            return Err(TensorError::Domain {
                op: "mean_rows",
                msg: "no rows".into(),
            });
        }
        let mut out = Tensor::zeros(1, t.cols);
        for r in 0..t.rows {
            for (o, x) in out.data.iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        let n = t.rows as f64;
        out.data.iter_mut().for_each(|x| *x /= n);
        Ok(self.push(out, Op::MeanRows(a), &[a]))
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Domain {
                op: "mean",
                msg: "no inputs".into(),
            });
        };
        for &p in &parts[1..] {
            self.same_shape("mean", first, p)?;
        }
        let mut out = self.value(first).clone();
        for &p in &parts[1..] {
            let t = self.nodes[p.0].value.clone();
            out.add_assign(&t);
        }
        let n = parts.len() as f64;
        out.data.iter_mut().for_each(|x| *x /= n);
        Ok(self.push(out, Op::Mean(parts.to_vec()), parts))
    }

    /// Inner product of two equally shaped tensors, as a `1 × 1` tensor.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let s: f64 = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Inverted dropout. With `rng == None` (evaluation) or `rate == 0` the
    /// input is returned untouched; otherwise each entry is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Domain {
                op: "dropout",
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        let Some(rng) = rng else { return Ok(a) };
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let t = self.value(a);
        let out = Tensor {
            rows: t.rows,
            cols: t.cols,
            data: t.data.iter().zip(&mask).map(|(x, m)| x * m).collect(),
        };
        Ok(self.push(out, Op::Dropout(a, mask), &[a]))
    }

    /// Back-propagates from a `1 × 1` output. Gradients from any earlier pass
    /// are discarded first.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.shape(output) != (1, 1) {
            return Err(TensorError::NotVector {
                op: "backward",
                shape: self.shape(output),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[output.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &grad);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(node.value.shape(), g.shape());
        match &mut node.grad {
            Some(acc) => acc.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, out_idx: usize, op: &Op, g: &Tensor) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let bt = self.value(*b).transpose();
                    let ga = g.matmul(&bt).expect("matmul grad shape");
                    self.accumulate(*a, ga);
                }
                if self.needs(*b) {
                    let at = self.value(*a).transpose();
                    let gb = at.matmul(g).expect("matmul grad shape");
                    self.accumulate(*b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.clone());
                let neg = scaled(g, -1.0);
                self.accumulate(*b, neg);
            }
            Op::Mul(a, b) => {
                let ga = hadamard(g, self.value(*b));
                let gb = hadamard(g, self.value(*a));
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(&tb.data).map(|(d, y)| d / y).collect(),
                };
                let gb = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g
                        .data
                        .iter()
                        .zip(ta.data.iter().zip(&tb.data))
                        .map(|(d, (x, y))| -d * x / (y * y))
                        .collect(),
                };
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Scale(a, f) => self.accumulate(*a, scaled(g, *f)),
            Op::Transpose(a) => self.accumulate(*a, g.transpose()),
            Op::Exp(a) => {
                let ga = hadamard(g, &self.nodes[out_idx].value);
                self.accumulate(*a, ga);
            }
            Op::Log(a) => {
                let t = self.value(*a);
                let ga = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(&t.data).map(|(d, x)| d / x).collect(),
                };
                self.accumulate(*a, ga);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[out_idx].value;
                let ga = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(&y.data).map(|(d, s)| d / (2.0 * s)).collect(),
                };
                self.accumulate(*a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let t = self.value(*a);
                let ga = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g
                        .data
                        .iter()
                        .zip(&t.data)
                        .map(|(d, x)| if *x >= 0.0 { *d } else { d * slope })
                        .collect(),
                };
                self.accumulate(*a, ga);
            }
            Op::Softmax(a) => {
                let y = &self.nodes[out_idx].value;
                let inner: f64 = y.data.iter().zip(&g.data).map(|(p, d)| p * d).sum();
                let ga = Tensor {
                    rows: y.rows,
                    cols: y.cols,
                    data: y.data.iter().zip(&g.data).map(|(p, d)| p * (d - inner)).collect(),
                };
                self.accumulate(*a, ga);
            }
            Op::LogSumExp(a) => {
                let t = self.value(*a);
                let p = softmax_slice(&t.data);
                let d = g.data[0];
                let ga = Tensor {
                    rows: t.rows,
                    cols: t.cols,
                    data: p.into_iter().map(|x| x * d).collect(),
                };
                self.accumulate(*a, ga);
            }
            Op::ConcatVec(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (rows, cols) = self.shape(*p);
                    let n = rows * cols;
                    let gp = Tensor {
                        rows,
                        cols,
                        data: g.data[offset..offset + n].to_vec(),
                    };
                    offset += n;
                    self.accumulate(*p, gp);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (rows, cols) = self.shape(*p);
                    let mut gp = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        gp.data[r * cols..(r + 1) * cols]
                            .copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    offset += cols;
                    self.accumulate(*p, gp);
                }
            }
            Op::GatherRows(a, index) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for (r, &src) in index.iter().enumerate() {
                    for (o, d) in ga.data[src * cols..(src + 1) * cols].iter_mut().zip(g.row(r)) {
                        *o += d;
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::ScatterAddRows(a, index) => {
                let cols = g.cols;
                let mut data = Vec::with_capacity(index.len() * cols);
                for &dst in index {
                    data.extend_from_slice(g.row(dst));
                }
                let ga = Tensor {
                    rows: index.len(),
                    cols,
                    data,
                };
                self.accumulate(*a, ga);
            }
            Op::SegmentSoftmax(a, group) => {
                let y = &self.nodes[out_idx].value;
                let n_groups = group.iter().max().map_or(0, |m| m + 1);
                let mut inner = vec![0.0; n_groups];
                for ((p, d), &k) in y.data.iter().zip(&g.data).zip(group) {
                    inner[k] += p * d;
                }
                let data = y
                    .data
                    .iter()
                    .zip(&g.data)
                    .zip(group)
                    .map(|((p, d), &k)| p * (d - inner[k]))
                    .collect();
                let ga = Tensor {
                    rows: y.rows,
                    cols: 1,
                    data,
                };
                self.accumulate(*a, ga);
            }
            Op::MulRows(a, w) => {
                let (ta, tw) = (self.value(*a), self.value(*w));
                let cols = ta.cols;
                let mut ga = g.clone();
                let mut gw = Tensor::zeros(tw.rows, 1);
                for r in 0..ta.rows {
                    let s = tw.data[r];
                    let mut acc = 0.0;
                    for c in 0..cols {
                        acc += g.data[r * cols + c] * ta.data[r * cols + c];
                        ga.data[r * cols + c] *= s;
                    }
                    gw.data[r] = acc;
                }
                self.accumulate(*a, ga);
                self.accumulate(*w, gw);
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.shape(*a);
                let n = rows as f64;
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    for (o, d) in ga.data[r * cols..(r + 1) * cols].iter_mut().zip(&g.data) {
                        *o = d / n;
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::Mean(parts) => {
                let gp = scaled(g, 1.0 / parts.len() as f64);
                for p in parts {
                    self.accumulate(*p, gp.clone());
                }
            }
            Op::Dot(a, b) => {
                let d = g.data[0];
                let ga = scaled(self.value(*b), d);
                let gb = scaled(self.value(*a), d);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Sum(a) => {
                let (rows, cols) = self.shape(*a);
                self.accumulate(*a, Tensor::filled(rows, cols, g.data[0]));
            }
            Op::Dropout(a, mask) => {
                let ga = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(mask).map(|(d, m)| d * m).collect(),
                };
                self.accumulate(*a, ga);
            }
        }
    }
}

fn scaled(t: &Tensor, f: f64) -> Tensor {
    Tensor {
        rows: t.rows,
        cols: t.cols,
        data: t.data.iter().map(|x| x * f).collect(),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    /// Central-difference gradient of `f` with respect to each input.
    fn numeric_grad(inputs: &[Tensor], idx: usize, f: &dyn Fn(&[Tensor]) -> f64) -> Vec<f64> {
        let eps = 1e-5;
        let mut out = Vec::new();
        for k in 0..inputs[idx].len() {
            let mut plus = inputs.to_vec();
            plus[idx].as_mut_slice()[k] += eps;
            let mut minus = inputs.to_vec();
            minus[idx].as_mut_slice()[k] -= eps;
            out.push((f(&plus) - f(&minus)) / (2.0 * eps));
        }
        out
    }

    /// Builds the graph with `build`, reduces with a fixed random projection
    /// so every output entry matters, and compares against finite differences.
    fn check_grad(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |xs: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
            let y = build(&mut tape, &vars);
            let (r, c) = tape.shape(y);
            let w = tape.constant(random(r, c, 99));
            let s = tape.mul(y, w).unwrap();
            let s = tape.sum(s);
            tape.value(s).get(0, 0)
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let y = build(&mut tape, &vars);
        let (r, c) = tape.shape(y);
        let w = tape.constant(random(r, c, 99));
        let s = tape.mul(y, w).unwrap();
        let s = tape.sum(s);
        tape.backward(s).unwrap();
        for (i, v) in vars.iter().enumerate() {
            let analytic = tape.grad(*v).unwrap().as_slice().to_vec();
            let numeric = numeric_grad(inputs, i, &eval);
            for (a, n) in analytic.iter().zip(&numeric) {
                let err = (a - n).abs();
                assert!(
                    err < 1e-6 || err / n.abs().max(a.abs()) < 1e-4,
                    "input {i}: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let v = tape.constant(Tensor::new(2, 1, vec![3.0, 4.0]).unwrap());
        let y = tape.matmul(i, v).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[3.0, 4.0]);

        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::new(2, 1, vec![3.0, 4.0]).unwrap());
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        check_grad(&[random(3, 3, 1), random(3, 3, 2)], &|t, v| {
            t.matmul(v[0], v[1]).unwrap()
        });
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![0.0; 3]));
        let y = tape.softmax(v).unwrap();
        for p in tape.value(y).as_slice() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let v = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
        let y = tape.softmax(v).unwrap();
        let p = tape.value(y).as_slice();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] >= 0.0 && p[1] < 1e-300);
        assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_rejects_empty() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![]));
        assert!(matches!(
            tape.softmax(v),
            Err(TensorError::Domain { op: "softmax", .. })
        ));
    }

    #[test]
    fn leaky_relu_examples() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![2.0, -1.0, 0.0]));
        let y = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.value(y).as_slice(), &[2.0, -0.2, 0.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().as_slice(), &[1.0, 0.2, 1.0]);
    }

    #[test]
    fn concat_examples() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.param(Tensor::vector(vec![3.0]));
        let y = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[1.0, 2.0, 3.0]);

        let e = tape.constant(Tensor::vector(vec![]));
        let f = tape.constant(Tensor::vector(vec![5.0]));
        let y = tape.concat(&[e, f]).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[5.0]);

        let m = tape.constant(Tensor::zeros(2, 2));
        assert!(matches!(
            tape.concat(&[a, m]),
            Err(TensorError::NotVector { .. })
        ));
    }

    #[test]
    fn concat_gradient_splits_by_segment() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.param(Tensor::new(3, 1, vec![3.0, 4.0, 5.0]).unwrap());
        let c = tape.param(Tensor::vector(vec![6.0]));
        let y = tape.concat(&[a, b, c]).unwrap();
        let w = tape.constant(Tensor::vector((1..=6).map(f64::from).collect()));
        let d = tape.dot(y, w).unwrap();
        tape.backward(d).unwrap();
        assert_eq!(tape.grad(a).unwrap().shape(), (1, 2));
        assert_eq!(tape.grad(b).unwrap().shape(), (3, 1));
        assert_eq!(tape.grad(c).unwrap().shape(), (1, 1));
        assert_eq!(tape.grad(b).unwrap().as_slice(), &[3.0, 4.0, 5.0]);
        assert_eq!(tape.grad(c).unwrap().as_slice(), &[6.0]);
    }

    #[test]
    fn elementwise_gradients() {
        let a = random(2, 3, 3);
        let b = random(2, 3, 4);
        let pos = Tensor::new(2, 3, a.as_slice().iter().map(|x| x.abs() + 0.5).collect()).unwrap();
        check_grad(&[a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]).unwrap());
        check_grad(&[a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]).unwrap());
        check_grad(&[a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]).unwrap());
        check_grad(&[a.clone(), pos.clone()], &|t, v| t.div(v[0], v[1]).unwrap());
        check_grad(&[a.clone()], &|t, v| t.scale(v[0], -2.5));
        check_grad(&[a.clone()], &|t, v| t.transpose(v[0]));
        check_grad(&[a.clone()], &|t, v| t.exp(v[0]));
        check_grad(&[pos.clone()], &|t, v| t.log(v[0]).unwrap());
        check_grad(&[pos.clone()], &|t, v| t.sqrt(v[0]).unwrap());
        check_grad(&[a.clone()], &|t, v| t.sum(v[0]));
        check_grad(&[a.clone(), b.clone()], &|t, v| t.dot(v[0], v[1]).unwrap());
        check_grad(&[a.clone(), b.clone()], &|t, v| t.mean(&[v[0], v[1]]).unwrap());
        check_grad(&[a.clone()], &|t, v| t.mean_rows(v[0]).unwrap());
    }

    #[test]
    fn leaky_relu_gradient_away_from_kink() {
        let a = random(3, 3, 5);
        assert!(a.as_slice().iter().all(|x| x.abs() > 1e-3));
        check_grad(&[a], &|t, v| t.leaky_relu(v[0], 0.2));
    }

    #[test]
    fn reduction_and_structural_gradients() {
        let v = random(1, 5, 6);
        check_grad(&[v.clone()], &|t, x| t.softmax(x[0]).unwrap());
        check_grad(&[v.clone()], &|t, x| t.logsumexp(x[0]).unwrap());
        let m = random(4, 3, 7);
        let n = random(4, 2, 8);
        check_grad(&[m.clone(), n.clone()], &|t, x| t.concat_cols(&[x[0], x[1]]).unwrap());
        check_grad(&[v.clone(), random(1, 2, 9)], &|t, x| t.concat(&[x[0], x[1]]).unwrap());
        check_grad(&[m.clone()], &|t, x| t.gather_rows(x[0], &[2, 0, 2, 3]).unwrap());
        check_grad(&[m.clone()], &|t, x| t.scatter_add_rows(x[0], &[1, 0, 1, 2], 3).unwrap());
        let logits = random(6, 1, 10);
        check_grad(&[logits], &|t, x| {
            t.segment_softmax(x[0], &[0, 1, 0, 2, 1, 0]).unwrap()
        });
        check_grad(&[m.clone(), random(4, 1, 11)], &|t, x| t.mul_rows(x[0], x[1]).unwrap());
    }

    #[test]
    fn dropout_gradient_uses_mask() {
        let a = random(3, 4, 12);
        check_grad(&[a], &|t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            t.dropout(v[0], 0.3, Some(&mut rng)).unwrap()
        });
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut tape = Tape::new();
        let a = tape.param(random(2, 2, 13));
        let y = tape.dropout::<ChaCha8Rng>(a, 0.5, None).unwrap();
        assert_eq!(y, a);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(tape.dropout(a, 1.0, Some(&mut rng)).is_err());
        let y = tape.dropout(a, 0.5, Some(&mut rng)).unwrap();
        for (out, inp) in tape.value(y).as_slice().iter().zip(tape.value(a).as_slice()) {
            assert!(*out == 0.0 || (out - 2.0 * inp).abs() < 1e-15);
        }
    }

    #[test]
    fn chained_composition_gradient() {
        // x W1 -> leaky -> W2 -> softmax -> log -> dot -> scale
        let x = random(1, 4, 20);
        let w1 = random(4, 3, 21);
        let w2 = random(3, 3, 22);
        check_grad(&[x, w1, w2], &|t, v| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let h = t.leaky_relu(h, 0.2);
            let h = t.matmul(h, v[2]).unwrap();
            let p = t.softmax(h).unwrap();
            let l = t.log(p).unwrap();
            let e = t.exp(h);
            let d = t.dot(l, e).unwrap();
            t.scale(d, 0.5)
        });
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap().as_slice(), &[7.0]);
        // a second backward does not double count
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap().as_slice(), &[7.0]);
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(c, x).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().as_slice(), &[2.0]);
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(2, 2));
        assert!(tape.backward(x).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(xs in prop::collection::vec(-1e6f64..1e6, 1..40)) {
            let p = softmax_slice(&xs);
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
        }

        #[test]
        fn segment_softmax_normalizes_each_group(
            xs in prop::collection::vec(-50f64..50.0, 1..30),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let group: Vec<usize> = xs.iter().map(|_| rng.random_range(0..4)).collect();
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::new(xs.len(), 1, xs.clone()).unwrap());
            let y = tape.segment_softmax(v, &group).unwrap();
            let mut sums = [0.0; 4];
            for (p, g) in tape.value(y).as_slice().iter().zip(&group) {
                sums[*g] += p;
            }
            for (g, s) in sums.iter().enumerate() {
                if group.contains(&g) {
                    prop_assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
