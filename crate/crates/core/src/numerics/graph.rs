//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs are earlier nodes, so the node
//! list is already in topological order and the backward pass is a single
//! reverse sweep.

use std::borrow::Cow;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::kernels;
use super::tensor::{lit, Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Gelu { x: Var },
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Vec<T>, rstd: Vec<T> },
    MaskedSoftmax { x: Var },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols { parts: Vec<Var> },
    CrossEntropy { logits: Var, targets: Vec<usize>, smoothing: T, probs: Tensor<T> },
    Sum { x: Var },
    Dropout { x: Var, keep_scale: Vec<T> },
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of one forward computation.
///
/// Leaves may borrow their values (`param`) so model weights are not copied
/// onto the tape. A graph is meant to be used from a single thread.
pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), dropout_rng: None }
    }

    /// A graph whose [`Graph::dropout`] calls are live, drawing from `rng`.
    pub fn with_dropout(rng: ChaCha8Rng) -> Self {
        Graph { nodes: Vec::new(), dropout_rng: Some(rng) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, requires_grad)
    }

    /// Differentiable leaf owning its value.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Differentiable leaf borrowing its value.
    pub fn param(&mut self, value: &'p Tensor<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'p Tensor<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.owned(out, Op::MatMul { a, b }, &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.owned(out, Op::MatMulNt { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch(format!("add {:?} + {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.owned(out, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.cols();
        if vb.numel() != c {
            return Err(Error::ShapeMismatch(format!(
                "add_row {:?} + {:?}",
                vx.shape(),
                vb.shape()
            )));
        }
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i % c])
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.owned(out, Op::AddRow { x, bias }, &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch(format!("mul {:?} * {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.owned(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|&v| v * factor);
        self.owned(out, Op::Scale { x, factor }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|&v| kernels::gelu(v));
        self.owned(out, Op::Gelu { x }, &[x])
    }

    /// Selects rows of a 2-D `table` (embedding lookup, row gathering).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (rows, cols) = (vt.rows(), vt.cols());
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::IndexOutOfRange { index: id, len: rows });
            }
            data.extend_from_slice(vt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.owned(out, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let ln = kernels::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let op = Op::LayerNorm { x, gain, bias, normed: ln.normed, rstd: ln.rstd };
        Ok(self.owned(ln.output, op, &[x, gain, bias]))
    }

    /// Row-wise softmax; `mask` entries equal to `true` are hidden.
    pub fn masked_softmax(&mut self, x: Var, mask: &Tensor<bool>) -> Result<Var> {
        let out = kernels::masked_softmax(self.value(x), mask)?;
        Ok(self.owned(out, Op::MaskedSoftmax { x }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        if start + len > cols {
            return Err(Error::IndexOutOfRange { index: start + len, len: cols });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        Ok(self.owned(out, Op::SliceCols { x, start, len }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return Err(Error::ShapeMismatch("concat of zero tensors".into())),
        };
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::ShapeMismatch("concat_cols row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.owned(out, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    /// Summed token-level cross-entropy (a scalar).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: T) -> Result<Var> {
        let (loss, probs) = kernels::cross_entropy_sum(self.value(logits), targets, smoothing)?;
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), smoothing, probs };
        Ok(self.owned(Tensor::scalar(loss), op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.owned(out, Op::Sum { x }, &[x])
    }

    /// Inverted dropout. Identity when the graph was built without a
    /// dropout generator or when `rate` is zero.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        let n = self.nodes[x.0].value.numel();
        let keep = lit::<T>(1.0 / (1.0 - rate));
        let keep_scale: Vec<T> =
            (0..n).map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep }).collect();
        let vx = self.value(x);
        let data = vx.data().iter().zip(&keep_scale).map(|(&v, &s)| v * s).collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        self.owned(out, Op::Dropout { x, keep_scale }, &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        op: &Op<T>,
        y: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                if self.wants(*a) {
                    accumulate(grads, *a, kernels::matmul_nt(dy, self.value(*b))?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, kernels::matmul_tn(self.value(*a), dy)?);
                }
            }
            Op::MatMulNt { a, b } => {
                if self.wants(*a) {
                    accumulate(grads, *a, kernels::matmul(dy, self.value(*b))?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, kernels::matmul_tn(dy, self.value(*a))?);
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, dy.clone());
                }
            }
            Op::AddRow { x, bias } => {
                if self.wants(*x) {
                    accumulate(grads, *x, dy.clone());
                }
                if self.wants(*bias) {
                    let c = dy.cols();
                    let mut db = vec![T::zero(); c];
                    for r in 0..dy.rows() {
                        for (acc, &g) in db.iter_mut().zip(dy.row(r)) {
                            *acc += g;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    accumulate(grads, *bias, Tensor::new(shape, db)?);
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let g = zip_map(dy, self.value(*b), |g, v| g * v);
                    accumulate(grads, *a, g);
                }
                if self.wants(*b) {
                    let g = zip_map(dy, self.value(*a), |g, v| g * v);
                    accumulate(grads, *b, g);
                }
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                accumulate(grads, *x, dy.map(|&g| g * f));
            }
            Op::Gelu { x } => {
                let g = zip_map(dy, self.value(*x), |g, v| g * kernels::gelu_grad(v));
                accumulate(grads, *x, g);
            }
            Op::Gather { table, ids } => {
                let vt = self.value(*table);
                let cols = vt.cols();
                let mut dt = Tensor::zeros(vt.shape().to_vec());
                let data = dt.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, &g) in data[id * cols..(id + 1) * cols].iter_mut().zip(dy.row(r)) {
                        *acc += g;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::LayerNorm { x, gain, bias, normed, rstd } => {
                let d = dy.cols();
                let rows = dy.rows();
                let gv = self.value(*gain).data();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            let g = dy.data()[r * d + j];
                            dg[j] += g * normed[r * d + j];
                            db[j] += g;
                        }
                    }
                    if self.wants(*gain) {
                        let shape = self.value(*gain).shape().to_vec();
                        accumulate(grads, *gain, Tensor::new(shape, dg)?);
                    }
                    if self.wants(*bias) {
                        let shape = self.value(*bias).shape().to_vec();
                        accumulate(grads, *bias, Tensor::new(shape, db)?);
                    }
                }
                if self.wants(*x) {
                    let inv_d = T::one() / lit::<T>(d as f64);
                    let mut dx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let mut mean_dn = T::zero();
                        let mut mean_dn_n = T::zero();
                        for j in 0..d {
                            let dn = dy.data()[r * d + j] * gv[j];
                            mean_dn += dn;
                            mean_dn_n += dn * normed[r * d + j];
                        }
                        mean_dn *= inv_d;
                        mean_dn_n *= inv_d;
                        for j in 0..d {
                            let dn = dy.data()[r * d + j] * gv[j];
                            dx[r * d + j] =
                                rstd[r] * (dn - mean_dn - normed[r * d + j] * mean_dn_n);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(dy.shape().to_vec(), dx)?);
                }
            }
            Op::MaskedSoftmax { x } => {
                let c = y.cols();
                let mut dx = vec![T::zero(); y.numel()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = dy.row(r);
                    let inner = kernels::dot(yr, gr);
                    for j in 0..c {
                        dx[r * c + j] = yr[j] * (gr[j] - inner);
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::SliceCols { x, start, len } => {
                let vx = self.value(*x);
                let cols = vx.cols();
                let mut dx = Tensor::zeros(vx.shape().to_vec());
                let data = dx.data_mut();
                for r in 0..vx.rows() {
                    data[r * cols + start..r * cols + start + len].copy_from_slice(dy.row(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let w = vp.cols();
                    if self.wants(p) {
                        let mut data = Vec::with_capacity(vp.numel());
                        for r in 0..vp.rows() {
                            data.extend_from_slice(&dy.row(r)[offset..offset + w]);
                        }
                        accumulate(grads, p, Tensor::new(vp.shape().to_vec(), data)?);
                    }
                    offset += w;
                }
            }
            Op::CrossEntropy { logits, targets, smoothing, probs } => {
                let g = dy.data()[0];
                let v = probs.cols();
                let on = T::one() - *smoothing;
                let off = *smoothing / lit::<T>(v as f64);
                let mut dl = probs.clone();
                let data = dl.data_mut();
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..v {
                        let mut q = off;
                        if j == t {
                            q += on;
                        }
                        data[r * v + j] = g * (data[r * v + j] - q);
                    }
                }
                accumulate(grads, *logits, dl);
            }
            Op::Sum { x } => {
                let g = dy.data()[0];
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::full(shape, g));
            }
            Op::Dropout { x, keep_scale } => {
                let data = dy.data().iter().zip(keep_scale).map(|(&g, &s)| g * s).collect();
                accumulate(grads, *x, Tensor::new(dy.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of a scalar loss with respect to every tape node that needs one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
