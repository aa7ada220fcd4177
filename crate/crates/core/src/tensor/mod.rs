//! Dense row-major `f64` tensors with a reverse-mode tape.
//!
//! The module has three layers:
//!
//! - [`Tensor`]: an owned n-dimensional array with the forward kernels the
//!   model needs (matmul, batched matmul, softmax, RMS normalization, row
//!   gather, permutation, ...). Every kernel checks shapes before touching
//!   data and reports a [`TensorError`] naming both operands.
//! - [`Tape`]: records kernel applications on [`Var`] handles and replays them
//!   backwards to produce a [`Gradients`] map.
//! - [`Backend`]: the op set written once by the model and implemented both by
//!   the tape (training) and by [`Eval`] (inference, no recording).
//!
//! There is no implicit broadcasting. Operands of elementwise ops must have
//! identical shapes; the only exceptions are the leading batch dimensions of
//! [`Tensor::matmul`] and the explicit [`Tensor::expand`].

mod backend;
mod tape;

pub use backend::{Backend, Eval};
pub use tape::{Gradients, Tape, Var};

use std::fmt;

/// Errors raised by tensor kernels and the tape.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range for a table of {bound} rows")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("cross_entropy: every target position is masked")]
    AllMasked,
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

/// An n-dimensional row-major array of `f64`.
///
/// An empty shape denotes a scalar. All dimensions are strictly positive.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let head: Vec<f64> = self.data.iter().take(PREVIEW).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &head)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(invalid("new", format!("zero dimension in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(invalid(
                "new",
                format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, x)| *x = f(i));
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(shape_err(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.same_shape(other, "add")?;
        Ok(self.zip(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.same_shape(other, "sub")?;
        Ok(self.zip(other, |a, b| a - b))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.same_shape(other, "mul")?;
        Ok(self.zip(other, |a, b| a * b))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
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

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }

    pub fn sum(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum())
    }

    /// `[..., m, k] x [k, n] -> [..., m, n]`. Leading dimensions of the left
    /// operand are treated as extra rows.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        let (a, b) = (&self.shape, &rhs.shape);
        if a.len() < 2 || b.len() != 2 || a[a.len() - 1] != b[0] {
            return Err(shape_err("matmul", a, b));
        }
        let k = b[0];
        let n = b[1];
        let rows = self.numel() / k;
        let mut out = vec![0.0; rows * n];
        gemm(&self.data, &rhs.data, rows, k, n, &mut out);
        let mut shape = a.clone();
        *shape.last_mut().unwrap() = n;
        Ok(Tensor { shape, data: out })
    }

    /// Batched matmul: `[B.., m, k] x [B.., k, n] -> [B.., m, n]` with equal
    /// leading dimensions.
    pub fn bmm(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        let (a, b) = (&self.shape, &rhs.shape);
        let r = a.len();
        if r < 3 || b.len() != r || a[..r - 2] != b[..r - 2] || a[r - 1] != b[r - 2] {
            return Err(shape_err("bmm", a, b));
        }
        let (m, k, n) = (a[r - 2], a[r - 1], b[r - 1]);
        let batch: usize = a[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                &self.data[i * m * k..(i + 1) * m * k],
                &rhs.data[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = a.clone();
        shape[r - 1] = n;
        Ok(Tensor { shape, data: out })
    }

    fn axis_layout(&self, axis: usize, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
        if axis >= self.shape.len() {
            return Err(invalid(op, format!("axis {axis} out of range for {:?}", self.shape)));
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor, TensorError> {
        let (outer, n, inner) = self.axis_layout(axis, "softmax")?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// `x / sqrt(mean(x^2) + eps) * scale` over the last axis.
    pub fn rms_norm(&self, scale: &Tensor, eps: f64) -> Result<Tensor, TensorError> {
        let d = *self.shape.last().ok_or_else(|| invalid("rms_norm", "scalar input"))?;
        if scale.shape != [d] {
            return Err(shape_err("rms_norm", &self.shape, &scale.shape));
        }
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data.chunks(d) {
            let r = inv_rms(row, eps);
            out.extend(row.iter().zip(&scale.data).map(|(x, s)| x * r * s));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Gathers rows of a `[rows, d]` table: `ids.len()` rows of width `d`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor, TensorError> {
        if self.shape.len() != 2 {
            return Err(invalid("gather_rows", format!("table must be 2-d, got {:?}", self.shape)));
        }
        if ids.is_empty() {
            return Err(invalid("gather_rows", "no indices"));
        }
        let (rows, d) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange { index: id, bound: rows });
            }
            out.extend_from_slice(&self.data[id * d..(id + 1) * d]);
        }
        Ok(Tensor {
            shape: vec![ids.len(), d],
            data: out,
        })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor, TensorError> {
        let r = self.shape.len();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid("permute", format!("{axes:?} is not a permutation of rank {r}")));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.numel());
        let mut index = vec![0usize; r];
        let mut offset = 0usize;
        for _ in 0..self.numel() {
            out.push(self.data[offset]);
            for ax in (0..r).rev() {
                index[ax] += 1;
                offset += src_strides[ax];
                if index[ax] < out_shape[ax] {
                    break;
                }
                offset -= src_strides[ax] * out_shape[ax];
                index[ax] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data: out,
        })
    }

    /// Repeats the tensor `n` times along a new leading axis.
    pub fn expand(&self, n: usize) -> Result<Tensor, TensorError> {
        if n == 0 {
            return Err(invalid("expand", "zero repetitions"));
        }
        let mut shape = Vec::with_capacity(self.shape.len() + 1);
        shape.push(n);
        shape.extend_from_slice(&self.shape);
        Ok(Tensor {
            shape,
            data: self.data.repeat(n),
        })
    }

    pub fn concat(&self, other: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
        let (a, b) = (&self.shape, &other.shape);
        if a.len() != b.len()
            || axis >= a.len()
            || a.iter().zip(b).enumerate().any(|(i, (x, y))| i != axis && x != y)
        {
            return Err(shape_err("concat", a, b));
        }
        let inner: usize = a[axis + 1..].iter().product();
        let outer: usize = a[..axis].iter().product();
        let (ca, cb) = (a[axis] * inner, b[axis] * inner);
        let mut out = Vec::with_capacity(self.numel() + other.numel());
        for o in 0..outer {
            out.extend_from_slice(&self.data[o * ca..(o + 1) * ca]);
            out.extend_from_slice(&other.data[o * cb..(o + 1) * cb]);
        }
        let mut shape = a.clone();
        shape[axis] += b[axis];
        Ok(Tensor { shape, data: out })
    }

    /// Splits along `axis` at `at`, the inverse of [`Tensor::concat`].
    pub fn split(&self, axis: usize, at: usize) -> Result<(Tensor, Tensor), TensorError> {
        let (outer, n, inner) = self.axis_layout(axis, "split")?;
        if at == 0 || at >= n {
            return Err(invalid("split", format!("split point {at} outside (0, {n})")));
        }
        let (ca, cb) = (at * inner, (n - at) * inner);
        let mut left = Vec::with_capacity(outer * ca);
        let mut right = Vec::with_capacity(outer * cb);
        for o in 0..outer {
            let row = &self.data[o * n * inner..(o + 1) * n * inner];
            left.extend_from_slice(&row[..ca]);
            right.extend_from_slice(&row[ca..]);
        }
        let mut ls = self.shape.clone();
        ls[axis] = at;
        let mut rs = self.shape.clone();
        rs[axis] = n - at;
        Ok((Tensor { shape: ls, data: left }, Tensor { shape: rs, data: right }))
    }

    /// Mean token-level negative log-likelihood.
    ///
    /// `self` is `[..., V]`; `targets` and `mask` have one entry per row.
    /// Rows with `mask == false` are excluded from both the sum and the count.
    pub fn cross_entropy(&self, targets: &[usize], mask: &[bool]) -> Result<Tensor, TensorError> {
        let (rows, v) = ce_layout(self, targets, mask)?;
        let count = mask.iter().filter(|&&m| m).count();
        let mut total = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = &self.data[r * v..(r + 1) * v];
            total += log_sum_exp(row) - row[targets[r]];
        }
        Ok(Tensor::scalar(total / count as f64))
    }
}

fn ce_layout(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<(usize, usize), TensorError> {
    let v = *logits
        .shape
        .last()
        .ok_or_else(|| invalid("cross_entropy", "scalar logits"))?;
    let rows = logits.numel() / v;
    if targets.len() != rows || mask.len() != rows {
        return Err(invalid(
            "cross_entropy",
            format!(
                "{rows} logit rows but {} targets and {} mask entries",
                targets.len(),
                mask.len()
            ),
        ));
    }
    if let Some(&t) = targets.iter().zip(mask).find(|(&t, &m)| m && t >= v).map(|(t, _)| t) {
        return Err(TensorError::IndexOutOfRange { index: t, bound: v });
    }
    if !mask.iter().any(|&m| m) {
        return Err(TensorError::AllMasked);
    }
    Ok((rows, v))
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn inv_rms(row: &[f64], eps: f64) -> f64 {
    let ms = row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64;
    1.0 / (ms + eps).sqrt()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out += a[m,k] * b[k,n]`
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m,k] * b[n,k]^T`
fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += a[k,m]^T * b[k,n]`
fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
