//! Forward kernels on plain tensors. The tape in [`super::graph`] calls these
//! and adds the matching vector-Jacobian products.

use crate::error::{Error, Result};

use super::tensor::{lit, Scalar, Tensor};

fn dims2<T: Clone>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        s => Err(Error::ShapeMismatch(format!("{what}: expected a matrix, got {s:?}"))),
    }
}

/// `a[m×k] · b[k×n]`
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul_nt lhs")?;
    let (n, k2) = dims2(b, "matmul_nt rhs")?;
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul_nt {:?} x {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &a.data()[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data()[j * k..(j + 1) * k];
            out.push(dot(arow, brow));
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = dims2(a, "matmul_tn lhs")?;
    let (k2, n) = dims2(b, "matmul_tn rhs")?;
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul_tn {:?}ᵀ x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a.data()[p * m..(p + 1) * m];
        let brow = &b.data()[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Row-wise softmax where `mask[i][j] == true` hides entry `(i, j)`.
///
/// Hidden entries come out as exactly `0.0` and never enter the exponentials
/// or the normalizer, so their logits may hold any value (including
/// non-finite ones) without affecting the live entries.
pub fn masked_softmax<T: Scalar>(logits: &Tensor<T>, mask: &Tensor<bool>) -> Result<Tensor<T>> {
    if logits.shape() != mask.shape() {
        return Err(Error::ShapeMismatch(format!(
            "masked_softmax logits {:?} vs mask {:?}",
            logits.shape(),
            mask.shape()
        )));
    }
    let cols = logits.cols();
    let mut out = vec![T::zero(); logits.numel()];
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let hidden = mask.row(r);
        let max = row
            .iter()
            .zip(hidden)
            .filter(|(_, &h)| !h)
            .map(|(&v, _)| v)
            .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
            .ok_or(Error::FullyMaskedRow { row: r })?;
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut total = T::zero();
        for ((o, &v), &h) in orow.iter_mut().zip(row).zip(hidden) {
            if !h {
                *o = (v - max).exp();
                total += *o;
            }
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Output of [`layer_norm`]: the result plus the cached normalized core and
/// reciprocal standard deviations needed for the backward pass.
pub struct LayerNormOut<T> {
    pub output: Tensor<T>,
    pub normed: Vec<T>,
    pub rstd: Vec<T>,
}

/// Normalizes each row of `x` to zero mean and unit (population) variance,
/// then applies `gain` and `bias`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<LayerNormOut<T>> {
    let d = x.cols();
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::ShapeMismatch(format!(
            "layer_norm over {d} features with gain {:?} and bias {:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    let rows = x.rows();
    let mut normed = vec![T::zero(); x.numel()];
    let mut out = vec![T::zero(); x.numel()];
    let mut rstd = Vec::with_capacity(rows);
    let inv_d = T::one() / lit::<T>(d as f64);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let denom = (var + eps).sqrt();
        let rs = if denom > T::zero() { T::one() / denom } else { T::zero() };
        rstd.push(rs);
        for j in 0..d {
            let n = (row[j] - mean) * rs;
            normed[r * d + j] = n;
            out[r * d + j] = n * gain.data()[j] + bias.data()[j];
        }
    }
    Ok(LayerNormOut {
        output: Tensor::new(x.shape().to_vec(), out)?,
        normed,
        rstd,
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = lit::<T>(GELU_C);
    let a = lit::<T>(GELU_A);
    let half = lit::<T>(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = lit::<T>(GELU_C);
    let a = lit::<T>(GELU_A);
    let half = lit::<T>(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + lit::<T>(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Row-wise log-softmax.
pub fn log_softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let cols = logits.cols();
    let mut out = Vec::with_capacity(logits.numel());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        out.extend(row.iter().map(|&v| v - lse));
    }
    debug_assert_eq!(out.len(), logits.rows() * cols);
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

/// Summed cross-entropy of `logits` rows against `targets`, with optional
/// label smoothing spread uniformly over the vocabulary. Returns the loss and
/// the row-wise softmax (reused by the backward pass).
pub fn cross_entropy_sum<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    smoothing: T,
) -> Result<(T, Tensor<T>)> {
    let v = logits.cols();
    if logits.rows() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "cross_entropy: {} rows vs {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::IndexOutOfRange { index: bad, len: v });
    }
    let logp = log_softmax(logits);
    let mut loss = T::zero();
    let on = T::one() - smoothing;
    let off = smoothing / lit::<T>(v as f64);
    for (r, &t) in targets.iter().enumerate() {
        let row = logp.row(r);
        loss -= on * row[t];
        if smoothing > T::zero() {
            loss -= off * row.iter().copied().sum::<T>();
        }
    }
    let probs = logp.map(|v| v.exp());
    Ok((loss, probs))
}
