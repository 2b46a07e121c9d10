use serde::{Deserialize, Serialize};

use super::Mode;
use crate::error::LayerError;
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const L2_EPSILON: f64 = 1e-12;

/// Batch normalization over the rows of a `[B × F]` input.
///
/// Running statistics follow `running = momentum·running + (1 − momentum)·batch`
/// using the biased batch variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormParams {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[features]),
            beta: Tensor::zeros(&[features]),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::ones(&[features]),
            momentum: 0.9,
            epsilon: BN_EPSILON,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    pub fn apply_running_stats(&mut self, stats: &RunningStats) {
        self.running_mean = stats.mean.clone();
        self.running_var = stats.var.clone();
    }
}

/// Updated running statistics produced by a train-mode forward pass. The
/// caller decides whether to commit them.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    mode: Mode,
    xhat: Tensor,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
}

pub fn batchnorm_forward(
    x: &Tensor,
    p: &BatchNormParams,
    mode: Mode,
) -> Result<(Tensor, BatchNormCache, Option<RunningStats>), LayerError> {
    let (b, f) = x.dims2()?;
    if f != p.features() {
        return Err(LayerError::Config(format!(
            "batch-norm over {} features applied to input {:?}",
            p.features(),
            x.shape()
        )));
    }
    if p.epsilon <= 0.0 {
        return Err(LayerError::Config("batch-norm epsilon must be positive".into()));
    }
    let (mean, var, stats) = match mode {
        Mode::Train => {
            if b < 2 {
                return Err(LayerError::BatchTooSmall { batch: b });
            }
            let mut mean = vec![0.0; f];
            for i in 0..b {
                for (m, v) in mean.iter_mut().zip(x.row(i)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= b as f64);
            let mut var = vec![0.0; f];
            for i in 0..b {
                for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= b as f64);
            let mom = p.momentum;
            let blend = |run: &Tensor, batch: &[f64]| {
                Tensor::from_vec(
                    run.data()
                        .iter()
                        .zip(batch)
                        .map(|(r, v)| mom * r + (1.0 - mom) * v)
                        .collect(),
                )
            };
            let stats = RunningStats {
                mean: blend(&p.running_mean, &mean),
                var: blend(&p.running_var, &var),
            };
            (mean, var, Some(stats))
        }
        Mode::Eval => (
            p.running_mean.data().to_vec(),
            p.running_var.data().to_vec(),
            None,
        ),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.epsilon).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for i in 0..b {
        let xr = xhat.row_mut(i);
        for j in 0..f {
            xr[j] = (xr[j] - mean[j]) * inv_std[j];
        }
        let xr = xhat.row(i).to_vec();
        let yr = y.row_mut(i);
        for j in 0..f {
            yr[j] = p.gamma.data()[j] * xr[j] + p.beta.data()[j];
        }
    }
    let cache = BatchNormCache {
        mode,
        xhat,
        inv_std,
        gamma: p.gamma.data().to_vec(),
    };
    Ok((y, cache, stats))
}

/// Returns `(dx, dgamma, dbeta)`. In train mode this includes the terms that
/// flow through the batch mean and variance.
pub fn batchnorm_backward(
    dy: &Tensor,
    cache: &BatchNormCache,
) -> Result<(Tensor, Tensor, Tensor), LayerError> {
    let (b, f) = dy.dims2()?;
    if cache.xhat.shape() != dy.shape() {
        return Err(crate::error::TensorError::Shape {
            op: "batchnorm_backward",
            left: dy.shape().to_vec(),
            right: cache.xhat.shape().to_vec(),
        }
        .into());
    }
    let mut dgamma = vec![0.0; f];
    let mut dbeta = vec![0.0; f];
    for i in 0..b {
        for (j, (&g, &xh)) in dy.row(i).iter().zip(cache.xhat.row(i)).enumerate() {
            dgamma[j] += g * xh;
            dbeta[j] += g;
        }
    }
    let mut dx = dy.zeros_like();
    match cache.mode {
        Mode::Train => {
            // dxhat = dy·γ; dx = inv_std/B · (B·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
            let n = b as f64;
            for i in 0..b {
                let dyr = dy.row(i);
                let xr = cache.xhat.row(i);
                let out = dx.row_mut(i);
                for j in 0..f {
                    let sum_dxhat = dbeta[j] * cache.gamma[j];
                    let sum_dxhat_xhat = dgamma[j] * cache.gamma[j];
                    let dxhat = dyr[j] * cache.gamma[j];
                    out[j] = cache.inv_std[j] / n * (n * dxhat - sum_dxhat - xr[j] * sum_dxhat_xhat);
                }
            }
        }
        Mode::Eval => {
            for i in 0..b {
                let dyr = dy.row(i);
                let out = dx.row_mut(i);
                for j in 0..f {
                    out[j] = dyr[j] * cache.gamma[j] * cache.inv_std[j];
                }
            }
        }
    }
    Ok((dx, Tensor::from_vec(dgamma), Tensor::from_vec(dbeta)))
}

#[derive(Debug, Clone)]
pub struct L2NormCache {
    output: Tensor,
    norms: Vec<f64>,
}

/// Row-wise `y_i = x_i / max(‖x_i‖, ε)`.
pub fn l2norm_forward(x: &Tensor) -> Result<(Tensor, L2NormCache), LayerError> {
    let (b, _) = x.dims2()?;
    let mut y = x.clone();
    let mut norms = Vec::with_capacity(b);
    for i in 0..b {
        let row = y.row_mut(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let d = n.max(L2_EPSILON);
        row.iter_mut().for_each(|v| *v /= d);
        norms.push(n);
    }
    Ok((y.clone(), L2NormCache { output: y, norms }))
}

pub fn l2norm_backward(dy: &Tensor, cache: &L2NormCache) -> Result<Tensor, LayerError> {
    let (b, _) = dy.dims2()?;
    let mut dx = dy.clone();
    for i in 0..b {
        let n = cache.norms[i];
        let out = dx.row_mut(i);
        if n > L2_EPSILON {
            // (I − y yᵀ)·dy / ‖x‖
            let y = cache.output.row(i);
            let dot: f64 = y.iter().zip(out.iter()).map(|(a, b)| a * b).sum();
            for (o, yv) in out.iter_mut().zip(y) {
                *o = (*o - yv * dot) / n;
            }
        } else {
            out.iter_mut().for_each(|o| *o /= L2_EPSILON);
        }
    }
    Ok(dx)
}
