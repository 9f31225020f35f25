//! Dense numeric kernels. Everything above this module works in terms of
//! [`DenseMatrix`] rows and the forward/backward pairs defined here.

mod layers;
mod matrix;

pub use layers::{
    batchnorm_backward, batchnorm_forward, batchnorm_inference, linear_backward, linear_forward, BatchNormCache,
    BatchNormGrads, BatchNormParams, BatchNormStats, LinearGrads, LinearParams,
};
pub use matrix::{dot, norm, DenseMatrix};

use crate::error::{Error, Result};

/// Column-wise softmax across the rows of `q`: each column of the result is a
/// probability distribution over the set members.
pub fn softmax_over_set(q: &DenseMatrix) -> Result<DenseMatrix> {
    let (n, d) = q.shape();
    if n == 0 {
        return Err(Error::EmptySet);
    }
    if !q.is_finite() {
        return Err(Error::NonFinite("softmax_over_set input"));
    }
    let mut col_max = vec![f64::NEG_INFINITY; d];
    for row in q.iter_rows() {
        for (m, &v) in col_max.iter_mut().zip(row) {
            *m = m.max(v);
        }
    }
    let mut out = DenseMatrix::zeros(n, d);
    let mut sums = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            let e = (q[(i, j)] - col_max[j]).exp();
            out[(i, j)] = e;
            sums[j] += e;
        }
    }
    for i in 0..n {
        for (v, s) in out.row_mut(i).iter_mut().zip(&sums) {
            *v /= s;
        }
    }
    Ok(out)
}

/// Softmax of a plain vector, stabilized the same way.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptySet);
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

/// Cosine similarity clamped to `[-1, 1]`.
///
/// A zero-norm operand scores `-1`, so zero-vector (empty template)
/// representations always rank below any real match.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return -1.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

pub fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
