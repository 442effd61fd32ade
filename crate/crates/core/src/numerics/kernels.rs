//! Forward kernels shared by the graph ops and usable on their own.

use super::real::{gemm, MatView, MatViewMut};
use super::{NumericsError, Real, Tensor};

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(NumericsError::Shape(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![T::zero(); m * n];
    gemm(
        T::one(),
        MatView::row_major(a.data(), m, k),
        MatView::row_major(b.data(), k, n),
        T::zero(),
        MatViewMut::row_major(&mut out, m, n),
    );
    let out = Tensor::matrix(m, n, out)?;
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// Numerically stable softmax (shifted by the max entry).
pub fn softmax<T: Real>(x: &[T]) -> Vec<T> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place<T: Real>(x: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in x.iter_mut() {
        *v = *v / total;
    }
}

/// Layer normalisation with population variance.
pub fn layer_norm<T: Real>(x: &[T], gamma: &[T], beta: &[T], eps: T) -> Result<Vec<T>, NumericsError> {
    if x.is_empty() || gamma.len() != x.len() || beta.len() != x.len() {
        return Err(NumericsError::Shape(format!(
            "layer_norm over {} with gamma {} beta {}",
            x.len(),
            gamma.len(),
            beta.len()
        )));
    }
    let (mean, rstd) = moments(x, eps);
    Ok(x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| (v - mean) * rstd * g + b)
        .collect())
}

/// Mean and reciprocal standard deviation `1 / sqrt(var + eps)`.
///
/// With `eps == 0` and a constant input the reciprocal is defined as zero so
/// the normalised output is all zeros.
pub(crate) fn moments<T: Real>(x: &[T], eps: T) -> (T, T) {
    let n = T::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let denom = (var + eps).sqrt();
    let rstd = if denom > T::zero() { denom.recip() } else { T::zero() };
    (mean, rstd)
}

pub fn gelu<T: Real>(x: T) -> T {
    x.gelu()
}

/// Multi-head scaled dot-product attention without projections.
///
/// Returns the `L_q x d` output and the cached attention probabilities laid
/// out as `heads x L_q x L_k`.
pub fn attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Vec<T>), NumericsError> {
    let d = q.cols();
    if heads == 0 || d % heads != 0 {
        return Err(NumericsError::Heads { dim: d, heads });
    }
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(NumericsError::Shape(format!(
            "attention q {:?} k {:?} v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (lq, lk, dh) = (q.rows(), k.rows(), d / heads);
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut probs = vec![T::zero(); heads * lq * lk];
    let mut out = vec![T::zero(); lq * d];
    for h in 0..heads {
        let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
        gemm(
            scale,
            MatView::col_block(q.data(), lq, d, h * dh, dh),
            MatView::col_block(k.data(), lk, d, h * dh, dh).t(),
            T::zero(),
            MatViewMut::row_major(p, lq, lk),
        );
        for row in p.chunks_mut(lk) {
            softmax_in_place(row);
        }
        gemm(
            T::one(),
            MatView::row_major(p, lq, lk),
            MatView::col_block(v.data(), lk, d, h * dh, dh),
            T::zero(),
            MatViewMut::col_block(&mut out, lq, d, h * dh, dh),
        );
    }
    let out = Tensor::matrix(lq, d, out)?;
    out.ensure_finite("attention")?;
    Ok((out, probs))
}
