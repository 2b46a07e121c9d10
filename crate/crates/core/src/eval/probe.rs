//! A domain classifier fit from scratch on frozen features.
//!
//! The adversarially trained domain head is degraded by construction, so
//! invariance is measured by training a new classifier on half of the rows
//! and scoring it on the other half.

use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::error::EvalError;
use crate::layers::{fc_backward, fc_forward, relu_backward, relu_forward, sigmoid_xent, FcParams};
use crate::optim::{adam_step, AdamState, NamedTensors};
use crate::rng::Rng;
use crate::tensor::{ReduceOp, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Hidden width; 0 gives a linear (logistic) probe.
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            steps: 400,
            lr: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Held-out accuracy. Near 0.5 means the domains are indistinguishable.
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Splits each domain in half with a seeded shuffle. Returns (train, test).
pub fn stratified_halves(domains: &[Domain], rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for d in [Domain::Image, Domain::Text] {
        let mut idx: Vec<usize> = (0..domains.len()).filter(|&i| domains[i] == d).collect();
        rng.shuffle(&mut idx);
        let half = idx.len().div_ceil(2);
        train.extend_from_slice(&idx[..half]);
        test.extend_from_slice(&idx[half..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn layers(params: &NamedTensors) -> Vec<FcParams> {
    params
        .0
        .chunks(2)
        .map(|p| FcParams {
            weight: p[0].1.clone(),
            bias: p[1].1.clone(),
        })
        .collect()
}

fn logits(params: &NamedTensors, x: &Tensor) -> Result<Tensor, EvalError> {
    let fcs = layers(params);
    let mut h = x.clone();
    for (k, fc) in fcs.iter().enumerate() {
        h = fc_forward(&h, fc).map_err(layer_err)?.0;
        if k + 1 < fcs.len() {
            h = relu_forward(&h).0;
        }
    }
    Ok(h)
}

fn layer_err(e: crate::error::LayerError) -> EvalError {
    EvalError::Shape(e.to_string())
}

fn accuracy(z: &Tensor, y: &Tensor) -> f64 {
    let right = z
        .data()
        .iter()
        .zip(y.data())
        .filter(|(&z, &t)| (z >= 0.0) == (t == 1.0))
        .count();
    right as f64 / z.len().max(1) as f64
}

/// Fits a binary image/text classifier on `features` `[N × F]` and reports
/// held-out accuracy.
pub fn domain_probe(
    features: &Tensor,
    domains: &[Domain],
    config: &ProbeConfig,
) -> Result<ProbeReport, EvalError> {
    let (n, f) = features.dims2()?;
    if n != domains.len() {
        return Err(EvalError::Shape(format!("{n} rows for {} domain tags", domains.len())));
    }
    let count = |d| domains.iter().filter(|&&x| x == d).count();
    if count(Domain::Image) < 2 || count(Domain::Text) < 2 {
        return Err(EvalError::TooFewRows { need: 4, got: n });
    }
    let mut rng = Rng::stream(config.seed, crate::rng::streams::PROBE);
    let (train, test) = stratified_halves(domains, &mut rng);

    // Standardize with training statistics.
    let xtr = features.select_rows(&train);
    let mean = xtr.reduce(ReduceOp::Mean, 0)?;
    let centered = xtr.sub(&mean)?;
    let var = centered.mul(&centered)?.reduce(ReduceOp::Mean, 0)?;
    let inv_std = var.map(|v| 1.0 / (v.sqrt() + 1e-8));
    let standardize = |x: &Tensor| -> Result<Tensor, EvalError> { Ok(x.sub(&mean)?.mul(&inv_std)?) };
    let xtr = standardize(&xtr)?;
    let xte = standardize(&features.select_rows(&test))?;
    let target = |idx: &[usize]| {
        Tensor::new(&[idx.len(), 1], idx.iter().map(|&i| domains[i].target()).collect())
            .expect("column shape")
    };
    let (ytr, yte) = (target(&train), target(&test));

    let mut dims = vec![f];
    if config.hidden > 0 {
        dims.push(config.hidden);
    }
    dims.push(1);
    let mut params = NamedTensors(Vec::new());
    for (k, w) in dims.windows(2).enumerate() {
        let fc = FcParams::he(w[0], w[1], &mut rng);
        params.0.push((format!("fc{k}.weight"), fc.weight));
        params.0.push((format!("fc{k}.bias"), fc.bias));
    }
    let mut adam = AdamState::new(config.lr);
    for _ in 0..config.steps {
        let fcs = layers(&params);
        let mut caches = Vec::new();
        let mut h = xtr.clone();
        for (k, fc) in fcs.iter().enumerate() {
            let (y, c) = fc_forward(&h, fc).map_err(layer_err)?;
            if k + 1 < fcs.len() {
                let (r, rc) = relu_forward(&y);
                caches.push((c, Some(rc)));
                h = r;
            } else {
                caches.push((c, None));
                h = y;
            }
        }
        let (_, mut dz) = sigmoid_xent(&h, &ytr).map_err(layer_err)?;
        let mut grads = vec![None; fcs.len()];
        for k in (0..fcs.len()).rev() {
            let (c, rc) = &caches[k];
            if let Some(rc) = rc {
                dz = relu_backward(&dz, rc);
            }
            let (dx, g) = fc_backward(&dz, c, &fcs[k]).map_err(layer_err)?;
            grads[k] = Some(g);
            dz = dx;
        }
        let g = NamedTensors(
            grads
                .into_iter()
                .enumerate()
                .flat_map(|(k, g)| {
                    let g = g.expect("every layer visited");
                    [(format!("fc{k}.weight"), g.weight), (format!("fc{k}.bias"), g.bias)]
                })
                .collect(),
        );
        adam_step(&mut params, &g, &mut adam).map_err(|e| EvalError::Shape(e.to_string()))?;
    }
    Ok(ProbeReport {
        accuracy: accuracy(&logits(&params, &xte)?, &yte),
        train_accuracy: accuracy(&logits(&params, &xtr)?, &ytr),
        n_train: train.len(),
        n_test: test.len(),
    })
}

/// Mean Euclidean distance over all unordered row pairs.
pub fn mean_pairwise_distance(x: &Tensor) -> Result<f64, EvalError> {
    let (n, _) = x.dims2()?;
    if n < 2 {
        return Err(EvalError::TooFewRows { need: 2, got: n });
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..i {
            total += x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}
