//! Per-channel batch normalization over NCHW tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Running mean/variance buffers, one entry per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnRunning {
    pub fn new(channels: usize) -> Self {
        BnRunning { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

/// Exact per-channel aggregates collected while re-estimating running stats.
#[derive(Debug, Clone)]
pub struct BnAccum {
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
    pub count: u64,
}

impl BnAccum {
    pub fn new(channels: usize) -> Self {
        BnAccum { sum: vec![0.0; channels], sum_sq: vec![0.0; channels], count: 0 }
    }

    pub fn finalize(&self) -> BnRunning {
        let n = self.count as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let var: Vec<f64> = self
            .sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / n - m * m).max(0.0))
            .collect();
        BnRunning { mean, var }
    }
}

/// Normalization constants captured at forward time for the backward pass.
#[derive(Debug, Clone)]
pub struct BnSaved {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// True when batch statistics were used (backward must account for the
    /// dependence of mean/var on the input).
    pub batch_stats: bool,
}

fn check_channels(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = input.dims4();
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::Shape(format!(
            "batchnorm parameter length {} / {} does not match {c} channels",
            gamma.numel(),
            beta.numel()
        )));
    }
    Ok((n, c, h * w))
}

fn batch_moments(input: &Tensor, n: usize, c: usize, area: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * area) as f64;
    let data = input.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut sum = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * area;
            sum += data[base..base + area].iter().sum::<f64>();
        }
        mean[ci] = sum / m;
        let mut sq = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * area;
            for &x in &data[base..base + area] {
                let d = x - mean[ci];
                sq += d * d;
            }
        }
        var[ci] = sq / m;
    }
    (mean, var)
}

fn normalize(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    n: usize,
    c: usize,
    area: usize,
) -> Tensor {
    let data = input.data();
    let mut out = vec![0.0; data.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * area;
            let g = gamma.data()[ci];
            let b = beta.data()[ci];
            let mu = mean[ci];
            let inv = inv_std[ci];
            for (o, &x) in out[base..base + area].iter_mut().zip(&data[base..base + area]) {
                *o = g * (x - mu) * inv + b;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out).expect("bn shape")
}

/// Train-mode forward: normalize by batch statistics and fold them into the
/// running buffers with momentum [`BN_MOMENTUM`].
pub fn batchnorm_train_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &mut BnRunning,
) -> Result<(Tensor, BnSaved)> {
    let (n, c, area) = check_channels(input, gamma, beta)?;
    if running.mean.len() != c {
        return Err(Error::Shape("running stats length mismatch".into()));
    }
    let (mean, var) = batch_moments(input, n, c, area);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    for ci in 0..c {
        running.mean[ci] = BN_MOMENTUM * running.mean[ci] + (1.0 - BN_MOMENTUM) * mean[ci];
        running.var[ci] = BN_MOMENTUM * running.var[ci] + (1.0 - BN_MOMENTUM) * var[ci];
    }
    let out = normalize(input, gamma, beta, &mean, &inv_std, n, c, area);
    Ok((out, BnSaved { mean, inv_std, batch_stats: true }))
}

/// Eval-mode forward: normalize by the running statistics.
pub fn batchnorm_eval_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &BnRunning,
) -> Result<(Tensor, BnSaved)> {
    let (n, c, area) = check_channels(input, gamma, beta)?;
    if running.mean.len() != c {
        return Err(Error::Shape("running stats length mismatch".into()));
    }
    let inv_std: Vec<f64> = running.var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let out = normalize(input, gamma, beta, &running.mean, &inv_std, n, c, area);
    Ok((out, BnSaved { mean: running.mean.clone(), inv_std, batch_stats: false }))
}

/// Stat-collection forward: behave like train mode but accumulate exact sums
/// instead of touching the running buffers.
pub fn batchnorm_collect_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    accum: &mut BnAccum,
) -> Result<(Tensor, BnSaved)> {
    let (n, c, area) = check_channels(input, gamma, beta)?;
    let data = input.data();
    for ci in 0..c {
        for ni in 0..n {
            let base = (ni * c + ci) * area;
            for &x in &data[base..base + area] {
                accum.sum[ci] += x;
                accum.sum_sq[ci] += x * x;
            }
        }
    }
    accum.count += (n * area) as u64;
    let (mean, var) = batch_moments(input, n, c, area);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let out = normalize(input, gamma, beta, &mean, &inv_std, n, c, area);
    Ok((out, BnSaved { mean, inv_std, batch_stats: true }))
}

/// Returns (grad_input, grad_gamma, grad_beta).
pub fn batchnorm_backward(
    input: &Tensor,
    gamma: &Tensor,
    saved: &BnSaved,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = input.dims4();
    let area = h * w;
    let m = (n * area) as f64;
    let data = input.data();

    let mut grad_in = vec![0.0; data.len()];
    let mut grad_gamma = vec![0.0; c];
    let mut grad_beta = vec![0.0; c];

    for ci in 0..c {
        let mu = saved.mean[ci];
        let inv = saved.inv_std[ci];
        let g = gamma.data()[ci];

        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * area;
            for i in 0..area {
                let dy = grad_out[base + i];
                let xhat = (data[base + i] - mu) * inv;
                sum_dy += dy;
                sum_dy_xhat += dy * xhat;
            }
        }
        grad_gamma[ci] = sum_dy_xhat;
        grad_beta[ci] = sum_dy;

        for ni in 0..n {
            let base = (ni * c + ci) * area;
            for i in 0..area {
                let dy = grad_out[base + i];
                let xhat = (data[base + i] - mu) * inv;
                grad_in[base + i] = if saved.batch_stats {
                    g * inv / m * (m * dy - sum_dy - xhat * sum_dy_xhat)
                } else {
                    g * inv * dy
                };
            }
        }
    }
    (grad_in, grad_gamma, grad_beta)
}
