//! Adam and the adaptation-factor schedule.

use serde::{Deserialize, Serialize};

use crate::error::OptimError;
use crate::model::ModelParams;
use crate::tensor::Tensor;

/// Anything holding an ordered list of named trainable tensors.
pub trait ParamSet {
    fn named(&self) -> Vec<(String, &Tensor)>;
    /// Same order as [`ParamSet::named`].
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;
}

impl ParamSet for ModelParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        ModelParams::named(self)
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        ModelParams::tensors_mut(self)
    }
}

/// A free-standing list of named tensors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NamedTensors(pub Vec<(String, Tensor)>);

impl ParamSet for NamedTensors {
    fn named(&self) -> Vec<(String, &Tensor)> {
        self.0.iter().map(|(n, t)| (n.clone(), t)).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.0.iter_mut().map(|(_, t)| t).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of steps taken.
    pub t: u64,
    /// First moments, parallel to the parameter list. Empty before the first step.
    pub m: Vec<Tensor>,
    /// Second moments.
    pub v: Vec<Tensor>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(1e-5)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
///
/// All gradients are checked before anything is modified, so a rejected step
/// leaves both `params` and `state` untouched.
pub fn adam_step<P: ParamSet>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
) -> Result<(), OptimError> {
    let named_grads = grads.named();
    let shapes: Vec<Vec<usize>> = params
        .named()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    if shapes.len() != named_grads.len() {
        return Err(OptimError::Mismatch(format!(
            "{} parameter tensors but {} gradients",
            shapes.len(),
            named_grads.len()
        )));
    }
    for (shape, (name, g)) in shapes.iter().zip(&named_grads) {
        if g.shape() != shape.as_slice() {
            return Err(OptimError::Mismatch(format!(
                "`{name}`: gradient {:?} vs parameter {shape:?}",
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(OptimError::NonFiniteGradient(name.clone()));
        }
    }
    if state.m.is_empty() {
        state.m = named_grads.iter().map(|(_, g)| g.zeros_like()).collect();
        state.v = state.m.clone();
    } else if state.m.len() != shapes.len() {
        return Err(OptimError::Mismatch(format!(
            "optimizer state tracks {} tensors, model has {}",
            state.m.len(),
            shapes.len()
        )));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, (_, g)), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(&named_grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// `λ(p) = 2 / (1 + e^{−γ·p}) − 1` with `p = step / max_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub gamma: f64,
    pub max_steps: u64,
}

impl LambdaSchedule {
    pub fn new(gamma: f64, max_steps: u64) -> Self {
        Self { gamma, max_steps }
    }

    pub fn at_progress(&self, p: f64) -> f64 {
        2.0 / (1.0 + (-self.gamma * p).exp()) - 1.0
    }

    /// Steps past `max_steps` are clamped to `p = 1`.
    pub fn lambda_at(&self, step: u64) -> f64 {
        if step > self.max_steps {
            log::warn!(
                "step {step} beyond schedule length {}; clamping to p = 1",
                self.max_steps
            );
        }
        let p = if self.max_steps == 0 {
            1.0
        } else {
            step.min(self.max_steps) as f64 / self.max_steps as f64
        };
        self.at_progress(p)
    }
}

/// Where the adaptation factor comes from each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LambdaPolicy {
    Scheduled(LambdaSchedule),
    /// Fixed value, for ablations.
    Constant(f64),
}

impl LambdaPolicy {
    pub fn lambda_at(&self, step: u64) -> f64 {
        match self {
            LambdaPolicy::Scheduled(s) => s.lambda_at(step),
            LambdaPolicy::Constant(v) => *v,
        }
    }
}
