use serde::{Deserialize, Serialize};

use super::Mode;
use crate::error::LayerError;
use crate::rng::Rng;
use crate::tensor::{ElemOp, Operand, Tensor};

/// Fully-connected layer `y = x·W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcParams {
    /// `[in × out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl FcParams {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    /// He initialization: `W ~ N(0, 2/fan_in)`, zero bias.
    pub fn he(input: usize, output: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / input as f64).sqrt();
        Self {
            weight: rng
                .gaussian(0.0, std, &[input, output])
                .expect("positive std"),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct FcCache {
    input: Tensor,
}

pub fn fc_forward(x: &Tensor, p: &FcParams) -> Result<(Tensor, FcCache), LayerError> {
    let y = x
        .matmul(&p.weight)?
        .elementwise(ElemOp::Add, Operand::Tensor(&p.bias))?;
    Ok((y, FcCache { input: x.clone() }))
}

/// Returns `(dx, grads)` where `grads` holds `dW` and `db`.
pub fn fc_backward(
    dy: &Tensor,
    cache: &FcCache,
    p: &FcParams,
) -> Result<(Tensor, FcParams), LayerError> {
    let dx = dy.matmul_nt(&p.weight)?;
    let dweight = cache.input.matmul_tn(dy)?;
    let dbias = dy.reduce(crate::tensor::ReduceOp::Sum, 0)?;
    Ok((
        dx,
        FcParams {
            weight: dweight,
            bias: dbias,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct ReluCache {
    active: Vec<bool>,
}

pub fn relu_forward(x: &Tensor) -> (Tensor, ReluCache) {
    let active = x.data().iter().map(|&v| v > 0.0).collect();
    (x.map(|v| if v > 0.0 { v } else { 0.0 }), ReluCache { active })
}

/// Gradient at exactly zero is zero.
pub fn relu_backward(dy: &Tensor, cache: &ReluCache) -> Tensor {
    let mut dx = dy.clone();
    for (d, &on) in dx.data_mut().iter_mut().zip(&cache.active) {
        if !on {
            *d = 0.0;
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub struct DropoutCache {
    /// Already scaled by `1/(1-rate)`; `None` when the layer was an identity.
    mask: Option<Tensor>,
}

impl DropoutCache {
    pub fn mask(&self) -> Option<&Tensor> {
        self.mask.as_ref()
    }
}

/// Inverted dropout: surviving units are scaled by `1/(1-rate)` at train
/// time so that eval mode is an identity.
pub fn dropout_forward(
    x: &Tensor,
    rate: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Tensor, DropoutCache), LayerError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(LayerError::DropoutRate(rate));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), DropoutCache { mask: None }));
    }
    let keep = 1.0 - rate;
    let mask = rng.bernoulli(keep, x.shape())?.scale(1.0 / keep);
    let y = x.mul(&mask)?;
    Ok((y, DropoutCache { mask: Some(mask) }))
}

pub fn dropout_backward(dy: &Tensor, cache: &DropoutCache) -> Result<Tensor, LayerError> {
    match &cache.mask {
        Some(mask) => Ok(dy.mul(mask)?),
        None => Ok(dy.clone()),
    }
}

/// Gradient reversal layer, forward pass: the identity.
pub fn grl_forward(x: &Tensor) -> Tensor {
    x.clone()
}

/// Gradient reversal layer, backward pass: `dx = -λ·dy`.
pub fn grl_backward(dy: &Tensor, lambda: f64) -> Tensor {
    debug_assert!(lambda >= 0.0, "adaptation factor must be non-negative");
    dy.map(|g| -lambda * g)
}
