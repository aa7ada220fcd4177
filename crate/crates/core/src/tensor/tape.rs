use std::cell::RefCell;
use std::sync::Arc;

use super::{ce_layout, gemm_nt, gemm_tn, inv_rms, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
///
/// A `Var` is only meaningful for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Softmax(Var, usize),
    RmsNorm { x: Var, scale: Var, eps: f64 },
    Gather { table: Var, ids: Arc<[usize]> },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Expand(Var),
    Concat { a: Var, b: Var, axis: usize },
    CrossEntropy { logits: Var, targets: Arc<[usize]>, mask: Arc<[bool]> },
    Sum(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records primitive ops for one forward pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and [`Tape::backward`] walks it once in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar loss with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// A leaf that gradients flow into.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf sharing storage with a parameter tensor.
    pub fn leaf_shared(&self, value: Arc<Tensor>) -> Var {
        self.push_arc(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = self.rg(parents);
        self.push(value, op, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).add(&self.value(b))?;
        Ok(self.record(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).mul(&self.value(b))?;
        Ok(self.record(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.record(out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).relu();
        self.record(out, Op::Relu(a), &[a])
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(&self.value(b))?;
        Ok(self.record(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn bmm(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).bmm(&self.value(b))?;
        Ok(self.record(out, Op::Bmm(a, b), &[a, b]))
    }

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let out = self.value(a).softmax(axis)?;
        Ok(self.record(out, Op::Softmax(a, axis), &[a]))
    }

    pub fn rms_norm(&self, x: Var, scale: Var, eps: f64) -> Result<Var, TensorError> {
        let out = self.value(x).rms_norm(&self.value(scale), eps)?;
        Ok(self.record(out, Op::RmsNorm { x, scale, eps }, &[x, scale]))
    }

    /// Row gather from a `[rows, d]` table, reshaped to `shape ++ [d]`.
    pub fn gather(&self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var, TensorError> {
        let rows = self.value(table).gather_rows(ids)?;
        let d = rows.shape()[1];
        let mut full = shape.to_vec();
        full.push(d);
        let out = rows.reshape(&full)?;
        let ids: Arc<[usize]> = ids.into();
        Ok(self.record(out, Op::Gather { table, ids }, &[table]))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.record(out, Op::Reshape(a), &[a]))
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).permute(axes)?;
        Ok(self.record(out, Op::Permute(a, axes.to_vec()), &[a]))
    }

    pub fn expand(&self, a: Var, n: usize) -> Result<Var, TensorError> {
        let out = self.value(a).expand(n)?;
        Ok(self.record(out, Op::Expand(a), &[a]))
    }

    pub fn concat(&self, a: Var, b: Var, axis: usize) -> Result<Var, TensorError> {
        let out = self.value(a).concat(&self.value(b), axis)?;
        Ok(self.record(out, Op::Concat { a, b, axis }, &[a, b]))
    }

    pub fn cross_entropy(&self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var, TensorError> {
        let out = self.value(logits).cross_entropy(targets, mask)?;
        Ok(self.record(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.into(),
                mask: mask.into(),
            },
            &[logits],
        ))
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = self.value(a).sum();
        self.record(out, Op::Sum(a), &[a])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut acc = |v: Var, t: Tensor| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            let val = |v: Var| nodes[v.0].value.as_ref();
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.mul(val(*b))?);
                    acc(*b, g.mul(val(*a))?);
                }
                Op::Scale(a, c) => acc(*a, g.scale(*c)),
                Op::Relu(a) => {
                    let mask = val(*a);
                    let mut d = g;
                    d.data_mut()
                        .iter_mut()
                        .zip(mask.data())
                        .for_each(|(x, &m)| {
                            if m <= 0.0 {
                                *x = 0.0
                            }
                        });
                    acc(*a, d);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (k, n) = (bv.shape()[0], bv.shape()[1]);
                    let rows = av.numel() / k;
                    let mut da = vec![0.0; rows * k];
                    gemm_nt(g.data(), bv.data(), rows, n, k, &mut da);
                    let mut db = vec![0.0; k * n];
                    gemm_tn(av.data(), g.data(), k, rows, n, &mut db);
                    acc(*a, Tensor::new(av.shape().to_vec(), da)?);
                    acc(*b, Tensor::new(bv.shape().to_vec(), db)?);
                }
                Op::Bmm(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let r = av.shape().len();
                    let (m, k, n) = (av.shape()[r - 2], av.shape()[r - 1], bv.shape()[r - 1]);
                    let batch = av.numel() / (m * k);
                    let mut da = vec![0.0; av.numel()];
                    let mut db = vec![0.0; bv.numel()];
                    for i in 0..batch {
                        let gi = &g.data()[i * m * n..(i + 1) * m * n];
                        gemm_nt(gi, &bv.data()[i * k * n..(i + 1) * k * n], m, n, k, &mut da[i * m * k..(i + 1) * m * k]);
                        gemm_tn(&av.data()[i * m * k..(i + 1) * m * k], gi, k, m, n, &mut db[i * k * n..(i + 1) * k * n]);
                    }
                    acc(*a, Tensor::new(av.shape().to_vec(), da)?);
                    acc(*b, Tensor::new(bv.shape().to_vec(), db)?);
                }
                Op::Softmax(a, axis) => {
                    let y = node.value.as_ref();
                    let (outer, n, inner) = y.axis_layout(*axis, "softmax")?;
                    let mut d = g.clone();
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g.data()[idx(j)] * y.data()[idx(j)]).sum();
                            for j in 0..n {
                                d.data_mut()[idx(j)] = y.data()[idx(j)] * (g.data()[idx(j)] - dot);
                            }
                        }
                    }
                    acc(*a, d);
                }
                Op::RmsNorm { x, scale, eps } => {
                    let (xv, sv) = (val(*x), val(*scale));
                    let d = sv.numel();
                    let mut dx = vec![0.0; xv.numel()];
                    let mut ds = vec![0.0; d];
                    for (r, row) in xv.data().chunks(d).enumerate() {
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let inv = inv_rms(row, *eps);
                        let mut gx = 0.0;
                        for j in 0..d {
                            ds[j] += gr[j] * row[j] * inv;
                            gx += gr[j] * sv.data()[j] * row[j];
                        }
                        let coef = inv * inv * inv * gx / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = inv * gr[j] * sv.data()[j] - row[j] * coef;
                        }
                    }
                    acc(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                    acc(*scale, Tensor::new(sv.shape().to_vec(), ds)?);
                }
                Op::Gather { table, ids } => {
                    let tv = val(*table);
                    let d = tv.shape()[1];
                    let mut dt = Tensor::zeros(tv.shape());
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &g.data()[i * d..(i + 1) * d];
                        dt.data_mut()[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                    acc(*table, dt);
                }
                Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape())?),
                Op::Permute(a, axes) => {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    acc(*a, g.permute(&inverse)?);
                }
                Op::Expand(a) => {
                    let inner = val(*a).numel();
                    let mut d = Tensor::zeros(val(*a).shape());
                    for chunk in g.data().chunks(inner) {
                        d.data_mut().iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                    acc(*a, d);
                }
                Op::Concat { a, b, axis } => {
                    let at = val(*a).shape()[*axis];
                    let (ga, gb) = g.split(*axis, at)?;
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::CrossEntropy { logits, targets, mask } => {
                    let lv = val(*logits);
                    let (rows, v) = ce_layout(lv, targets, mask)?;
                    let count = mask.iter().filter(|&&m| m).count() as f64;
                    let upstream = g.item() / count;
                    let mut d = Tensor::zeros(lv.shape());
                    for r in 0..rows {
                        if !mask[r] {
                            continue;
                        }
                        let row = &lv.data()[r * v..(r + 1) * v];
                        let lse = super::log_sum_exp(row);
                        let out = &mut d.data_mut()[r * v..(r + 1) * v];
                        for j in 0..v {
                            out[j] = (row[j] - lse).exp() * upstream;
                        }
                        out[targets[r]] -= upstream;
                    }
                    acc(*logits, d);
                }
                Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
            }
        }
        Ok(Gradients { grads })
    }
}
