use std::sync::Arc;

use super::{Tape, Tensor, TensorError, Var};

/// The op set the model is written against.
///
/// [`Tape`] records every op for differentiation; [`Eval`] computes values
/// directly. Both call the same [`Tensor`] kernels, so a forward pass gives
/// bit-identical values under either backend.
pub trait Backend {
    type Value: Clone;

    fn constant(&self, t: Tensor) -> Self::Value;
    /// Binds a parameter. On a tape this becomes a differentiable leaf.
    fn param(&self, t: &Arc<Tensor>) -> Self::Value;
    fn value(&self, v: &Self::Value) -> Arc<Tensor>;

    fn add(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, TensorError>;
    fn mul(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, TensorError>;
    fn scale(&self, a: &Self::Value, c: f64) -> Self::Value;
    fn relu(&self, a: &Self::Value) -> Self::Value;
    fn matmul(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, TensorError>;
    fn bmm(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, TensorError>;
    fn softmax(&self, a: &Self::Value, axis: usize) -> Result<Self::Value, TensorError>;
    fn rms_norm(&self, x: &Self::Value, scale: &Self::Value, eps: f64) -> Result<Self::Value, TensorError>;
    fn gather(&self, table: &Self::Value, ids: &[usize], shape: &[usize]) -> Result<Self::Value, TensorError>;
    fn reshape(&self, a: &Self::Value, shape: &[usize]) -> Result<Self::Value, TensorError>;
    fn permute(&self, a: &Self::Value, axes: &[usize]) -> Result<Self::Value, TensorError>;
    fn expand(&self, a: &Self::Value, n: usize) -> Result<Self::Value, TensorError>;
    fn concat(&self, a: &Self::Value, b: &Self::Value, axis: usize) -> Result<Self::Value, TensorError>;

    fn shape(&self, v: &Self::Value) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }
}

/// Direct evaluation without recording.
#[derive(Debug, Clone, Copy, Default)]
pub struct Eval;

type T = Arc<Tensor>;

impl Backend for Eval {
    type Value = T;

    fn constant(&self, t: Tensor) -> T {
        Arc::new(t)
    }
    fn param(&self, t: &T) -> T {
        t.clone()
    }
    fn value(&self, v: &T) -> T {
        v.clone()
    }
    fn add(&self, a: &T, b: &T) -> Result<T, TensorError> {
        a.add(b).map(Arc::new)
    }
    fn mul(&self, a: &T, b: &T) -> Result<T, TensorError> {
        a.mul(b).map(Arc::new)
    }
    fn scale(&self, a: &T, c: f64) -> T {
        Arc::new(a.scale(c))
    }
    fn relu(&self, a: &T) -> T {
        Arc::new(a.relu())
    }
    fn matmul(&self, a: &T, b: &T) -> Result<T, TensorError> {
        a.matmul(b).map(Arc::new)
    }
    fn bmm(&self, a: &T, b: &T) -> Result<T, TensorError> {
        a.bmm(b).map(Arc::new)
    }
    fn softmax(&self, a: &T, axis: usize) -> Result<T, TensorError> {
        a.softmax(axis).map(Arc::new)
    }
    fn rms_norm(&self, x: &T, scale: &T, eps: f64) -> Result<T, TensorError> {
        x.rms_norm(scale, eps).map(Arc::new)
    }
    fn gather(&self, table: &T, ids: &[usize], shape: &[usize]) -> Result<T, TensorError> {
        let rows = table.gather_rows(ids)?;
        let mut full = shape.to_vec();
        full.push(rows.shape()[1]);
        rows.reshape(&full).map(Arc::new)
    }
    fn reshape(&self, a: &T, shape: &[usize]) -> Result<T, TensorError> {
        a.reshape(shape).map(Arc::new)
    }
    fn permute(&self, a: &T, axes: &[usize]) -> Result<T, TensorError> {
        a.permute(axes).map(Arc::new)
    }
    fn expand(&self, a: &T, n: usize) -> Result<T, TensorError> {
        a.expand(n).map(Arc::new)
    }
    fn concat(&self, a: &T, b: &T, axis: usize) -> Result<T, TensorError> {
        a.concat(b, axis).map(Arc::new)
    }
}

impl Backend for Tape {
    type Value = Var;

    fn constant(&self, t: Tensor) -> Var {
        Tape::constant(self, t)
    }
    fn param(&self, t: &T) -> Var {
        self.leaf_shared(t.clone())
    }
    fn value(&self, v: &Var) -> T {
        Tape::value(self, *v)
    }
    fn add(&self, a: &Var, b: &Var) -> Result<Var, TensorError> {
        Tape::add(self, *a, *b)
    }
    fn mul(&self, a: &Var, b: &Var) -> Result<Var, TensorError> {
        Tape::mul(self, *a, *b)
    }
    fn scale(&self, a: &Var, c: f64) -> Var {
        Tape::scale(self, *a, c)
    }
    fn relu(&self, a: &Var) -> Var {
        Tape::relu(self, *a)
    }
    fn matmul(&self, a: &Var, b: &Var) -> Result<Var, TensorError> {
        Tape::matmul(self, *a, *b)
    }
    fn bmm(&self, a: &Var, b: &Var) -> Result<Var, TensorError> {
        Tape::bmm(self, *a, *b)
    }
    fn softmax(&self, a: &Var, axis: usize) -> Result<Var, TensorError> {
        Tape::softmax(self, *a, axis)
    }
    fn rms_norm(&self, x: &Var, scale: &Var, eps: f64) -> Result<Var, TensorError> {
        Tape::rms_norm(self, *x, *scale, eps)
    }
    fn gather(&self, table: &Var, ids: &[usize], shape: &[usize]) -> Result<Var, TensorError> {
        Tape::gather(self, *table, ids, shape)
    }
    fn reshape(&self, a: &Var, shape: &[usize]) -> Result<Var, TensorError> {
        Tape::reshape(self, *a, shape)
    }
    fn permute(&self, a: &Var, axes: &[usize]) -> Result<Var, TensorError> {
        Tape::permute(self, *a, axes)
    }
    fn expand(&self, a: &Var, n: usize) -> Result<Var, TensorError> {
        Tape::expand(self, *a, n)
    }
    fn concat(&self, a: &Var, b: &Var, axis: usize) -> Result<Var, TensorError> {
        Tape::concat(self, *a, *b, axis)
    }
}
