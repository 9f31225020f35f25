//! Batch normalization and fully-connected layers with hand-derived backward passes.

use crate::error::{Error, Result};

use super::matrix::DenseMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl BatchNormParams {
    /// Unit scale, zero shift.
    pub fn identity(dim: usize, eps: f64) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma.len() != self.beta.len() {
            return Err(Error::shape("BatchNormParams", self.gamma.len(), self.beta.len()));
        }
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return Err(Error::Config(format!("batch-norm eps must be >= 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Per-feature statistics frozen from training, applied at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    pub fn initial(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    /// Exponential moving average: `s <- momentum * s + (1 - momentum) * batch`.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], momentum: f64) {
        for (s, &b) in self.mean.iter_mut().zip(batch_mean) {
            *s = momentum * *s + (1.0 - momentum) * b;
        }
        for (s, &b) in self.var.iter_mut().zip(batch_var) {
            *s = momentum * *s + (1.0 - momentum) * b;
        }
    }
}

/// Everything the backward pass needs from a batch-statistics forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub normalized: DenseMatrix,
    pub inv_std: Vec<f64>,
    pub gamma: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Normalizes every column with the mean and (biased) variance of the rows
/// in `x`, then applies the affine `gamma`, `beta`.
pub fn batchnorm_forward(x: &DenseMatrix, p: &BatchNormParams) -> Result<(DenseMatrix, BatchNormCache)> {
    p.validate()?;
    let (n, m) = x.shape();
    if n == 0 {
        return Err(Error::EmptySet);
    }
    if m != p.dim() {
        return Err(Error::shape("batchnorm_forward", p.dim(), m));
    }

    let inv_n = 1.0 / n as f64;
    let mean: Vec<f64> = x.column_sums().into_iter().map(|s| s * inv_n).collect();
    let mut var = vec![0.0; m];
    for row in x.iter_rows() {
        for ((v, &xv), &mu) in var.iter_mut().zip(row).zip(&mean) {
            let c = xv - mu;
            *v += c * c;
        }
    }
    var.iter_mut().for_each(|v| *v *= inv_n);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();

    let mut normalized = DenseMatrix::zeros(n, m);
    let mut y = DenseMatrix::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let c = x[(i, j)] - mean[j];
            // a constant column with eps == 0 has nothing to normalize
            let xh = if c == 0.0 { 0.0 } else { c * inv_std[j] };
            normalized[(i, j)] = xh;
            y[(i, j)] = p.gamma[j] * xh + p.beta[j];
        }
    }
    if !y.is_finite() {
        return Err(Error::NonFinite("batchnorm_forward"));
    }
    let cache = BatchNormCache {
        normalized,
        inv_std,
        gamma: p.gamma.clone(),
        batch_mean: mean,
        batch_var: var,
    };
    Ok((y, cache))
}

/// Batch norm with frozen statistics; an affine map per column.
pub fn batchnorm_inference(x: &DenseMatrix, p: &BatchNormParams, stats: &BatchNormStats) -> Result<DenseMatrix> {
    p.validate()?;
    let m = p.dim();
    if x.cols() != m || stats.mean.len() != m || stats.var.len() != m {
        return Err(Error::shape("batchnorm_inference", m, x.cols()));
    }
    let scale: Vec<f64> = (0..m).map(|j| p.gamma[j] / (stats.var[j] + p.eps).sqrt()).collect();
    let mut y = x.clone();
    for i in 0..y.rows() {
        for (j, v) in y.row_mut(i).iter_mut().enumerate() {
            *v = (*v - stats.mean[j]) * scale[j] + p.beta[j];
        }
    }
    if !y.is_finite() {
        return Err(Error::NonFinite("batchnorm_inference"));
    }
    Ok(y)
}

pub struct BatchNormGrads {
    pub dx: DenseMatrix,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

/// Exact gradient of [`batchnorm_forward`], including the dependence of the
/// batch mean and variance on every input row.
pub fn batchnorm_backward(dy: &DenseMatrix, cache: &BatchNormCache) -> Result<BatchNormGrads> {
    let (n, m) = cache.normalized.shape();
    if dy.shape() != (n, m) || cache.inv_std.len() != m || cache.gamma.len() != m {
        return Err(Error::shape(
            "batchnorm_backward",
            format!("{n}x{m}"),
            format!("{}x{}", dy.rows(), dy.cols()),
        ));
    }
    let xh = &cache.normalized;
    let dbeta = dy.column_sums();
    let mut dgamma = vec![0.0; m];
    // sums of dxhat and dxhat * xhat per column
    let mut sum_dxh = vec![0.0; m];
    let mut sum_dxh_xh = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            let g = dy[(i, j)];
            dgamma[j] += g * xh[(i, j)];
            let dxh = g * cache.gamma[j];
            sum_dxh[j] += dxh;
            sum_dxh_xh[j] += dxh * xh[(i, j)];
        }
    }
    let nf = n as f64;
    let mut dx = DenseMatrix::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let dxh = dy[(i, j)] * cache.gamma[j];
            dx[(i, j)] = cache.inv_std[j] / nf * (nf * dxh - sum_dxh[j] - xh[(i, j)] * sum_dxh_xh[j]);
        }
    }
    Ok(BatchNormGrads { dx, dgamma, dbeta })
}

/// Affine map `Y = X W + b` with `W` stored as `in_dim x out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl LinearParams {
    pub fn new(weight: DenseMatrix, bias: Vec<f64>) -> Result<Self> {
        if weight.cols() != bias.len() {
            return Err(Error::shape("LinearParams::new", weight.cols(), bias.len()));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

pub fn linear_forward(x: &DenseMatrix, p: &LinearParams) -> Result<DenseMatrix> {
    if x.cols() != p.in_dim() || p.bias.len() != p.out_dim() {
        return Err(Error::shape("linear_forward", p.in_dim(), x.cols()));
    }
    let mut y = x.matmul(&p.weight)?;
    for i in 0..y.rows() {
        for (v, &b) in y.row_mut(i).iter_mut().zip(&p.bias) {
            *v += b;
        }
    }
    Ok(y)
}

pub struct LinearGrads {
    pub dx: DenseMatrix,
    pub dweight: DenseMatrix,
    pub dbias: Vec<f64>,
}

pub fn linear_backward(x: &DenseMatrix, dy: &DenseMatrix, p: &LinearParams) -> Result<LinearGrads> {
    if x.cols() != p.in_dim() || dy.cols() != p.out_dim() || x.rows() != dy.rows() {
        return Err(Error::shape(
            "linear_backward",
            format!("x: Nx{}, dy: Nx{}", p.in_dim(), p.out_dim()),
            format!("x: {}x{}, dy: {}x{}", x.rows(), x.cols(), dy.rows(), dy.cols()),
        ));
    }
    let dx = dy.matmul(&p.weight.transpose())?;
    let dweight = x.transpose().matmul(dy)?;
    let dbias = dy.column_sums();
    Ok(LinearGrads { dx, dweight, dbias })
}
