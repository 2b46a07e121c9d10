//! Sentence CNN: per filter width, a valid 1-D convolution along the word
//! axis, ReLU, then max-over-time pooling. Outputs for all widths are
//! concatenated into a `[B × widths·filters]` feature.

use serde::{Deserialize, Serialize};

use crate::error::LayerError;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextCnnParams {
    pub widths: Vec<usize>,
    /// One `[w × d_word × filters]` kernel per width.
    pub kernels: Vec<Tensor>,
    /// One `[filters]` bias per width.
    pub biases: Vec<Tensor>,
}

impl TextCnnParams {
    pub fn validate(widths: &[usize], filters: usize, max_len: usize) -> Result<(), LayerError> {
        if widths.is_empty() || filters == 0 {
            return Err(LayerError::Config(
                "text CNN needs at least one width and one filter".into(),
            ));
        }
        if widths[0] == 0 || widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LayerError::Config(format!(
                "filter widths must be positive and strictly increasing, got {widths:?}"
            )));
        }
        let widest = *widths.last().expect("non-empty");
        if widest > max_len {
            return Err(LayerError::SequenceTooShort {
                len: max_len,
                width: widest,
            });
        }
        Ok(())
    }

    /// He-initialized kernels (fan-in `w·d_word`) and zero biases.
    pub fn he(
        widths: &[usize],
        d_word: usize,
        filters: usize,
        max_len: usize,
        rng: &mut Rng,
    ) -> Result<Self, LayerError> {
        Self::validate(widths, filters, max_len)?;
        let mut kernels = Vec::with_capacity(widths.len());
        let mut biases = Vec::with_capacity(widths.len());
        for &w in widths {
            let std = (2.0 / (w * d_word) as f64).sqrt();
            kernels.push(rng.gaussian(0.0, std, &[w, d_word, filters])?);
            biases.push(Tensor::zeros(&[filters]));
        }
        Ok(Self {
            widths: widths.to_vec(),
            kernels,
            biases,
        })
    }

    pub fn filters(&self) -> usize {
        self.biases.first().map_or(0, Tensor::len)
    }

    pub fn d_word(&self) -> usize {
        self.kernels.first().map_or(0, |k| k.shape()[1])
    }

    pub fn output_dim(&self) -> usize {
        self.filters() * self.widths.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            widths: self.widths.clone(),
            kernels: self.kernels.iter().map(Tensor::zeros_like).collect(),
            biases: self.biases.iter().map(Tensor::zeros_like).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TextCnnCache {
    input: Tensor,
    /// Per width, `[B·filters]` winning position, `None` when the pooled
    /// value was clipped to zero by the ReLU.
    winners: Vec<Vec<Option<usize>>>,
}

pub fn textcnn_forward(
    x: &Tensor,
    p: &TextCnnParams,
) -> Result<(Tensor, TextCnnCache), LayerError> {
    let (b, len, d) = match x.shape() {
        &[b, l, d] => (b, l, d),
        s => {
            return Err(LayerError::Config(format!(
                "text CNN expects [batch × length × d_word], got {s:?}"
            )))
        }
    };
    if d != p.d_word() {
        return Err(LayerError::Config(format!(
            "text CNN built for d_word={} applied to input {:?}",
            p.d_word(),
            x.shape()
        )));
    }
    let filters = p.filters();
    let n_widths = p.widths.len();
    let mut feat = Tensor::zeros(&[b, filters * n_widths]);
    let mut winners = Vec::with_capacity(n_widths);
    let xd = x.data();
    for (wi, (&w, kernel)) in p.widths.iter().zip(&p.kernels).enumerate() {
        if len < w {
            return Err(LayerError::SequenceTooShort { len, width: w });
        }
        let positions = len - w + 1;
        let window = w * d;
        // Each window of `w` consecutive word rows is contiguous in memory, so
        // the unfolded matrix is a strided view of the input.
        let mut cols = Vec::with_capacity(b * positions * window);
        for s in 0..b {
            let base = s * len * d;
            for t in 0..positions {
                cols.extend_from_slice(&xd[base + t * d..base + t * d + window]);
            }
        }
        let cols = Tensor::new(&[b * positions, window], cols)?;
        let kmat = kernel.clone().reshape(&[window, filters])?;
        let conv = cols.matmul(&kmat)?;
        let bias = p.biases[wi].data();
        let mut win = vec![None; b * filters];
        for s in 0..b {
            let out = feat.row_mut(s);
            for f in 0..filters {
                let mut best_t = 0;
                let mut best = f64::NEG_INFINITY;
                for t in 0..positions {
                    let v = conv.data()[(s * positions + t) * filters + f];
                    if v > best {
                        best = v;
                        best_t = t;
                    }
                }
                let v = best + bias[f];
                if v > 0.0 {
                    out[wi * filters + f] = v;
                    win[s * filters + f] = Some(best_t);
                }
            }
        }
        winners.push(win);
    }
    Ok((
        feat,
        TextCnnCache {
            input: x.clone(),
            winners,
        },
    ))
}

/// Returns `(dx, dparams)`. Only the winning window of each active
/// (sample, filter) pair receives gradient.
pub fn textcnn_backward(
    dfeat: &Tensor,
    cache: &TextCnnCache,
    p: &TextCnnParams,
) -> Result<(Tensor, TextCnnParams), LayerError> {
    let (b, len, d) = match cache.input.shape() {
        &[b, l, d] => (b, l, d),
        _ => unreachable!("cache built from rank-3 input"),
    };
    let filters = p.filters();
    if dfeat.shape() != [b, filters * p.widths.len()] {
        return Err(crate::error::TensorError::Shape {
            op: "textcnn_backward",
            left: dfeat.shape().to_vec(),
            right: vec![b, filters * p.widths.len()],
        }
        .into());
    }
    let mut dx = vec![0.0; b * len * d];
    let mut grads = p.zeros_like();
    let xd = cache.input.data();
    for (wi, &w) in p.widths.iter().enumerate() {
        let kernel = p.kernels[wi].data();
        let dk = grads.kernels[wi].data_mut();
        let mut dbias = vec![0.0; filters];
        for s in 0..b {
            let g_row = dfeat.row(s);
            for f in 0..filters {
                let Some(t) = cache.winners[wi][s * filters + f] else {
                    continue;
                };
                let g = g_row[wi * filters + f];
                if g == 0.0 {
                    continue;
                }
                dbias[f] += g;
                let start = s * len * d + t * d;
                for k in 0..w * d {
                    dk[k * filters + f] += g * xd[start + k];
                    dx[start + k] += g * kernel[k * filters + f];
                }
            }
        }
        grads.biases[wi] = Tensor::from_vec(dbias);
    }
    Ok((Tensor::new(&[b, len, d], dx)?, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{contract, max_relative_error, numeric_gradient, DEFAULT_STEP};

    const FLOOR: f64 = 1e-3;

    #[test]
    fn zero_kernel_gives_zero_features() {
        let mut p = TextCnnParams::he(&[2, 3], 4, 5, 6, &mut Rng::new(0)).unwrap();
        p.kernels.iter_mut().for_each(|k| *k = k.zeros_like());
        let x = Rng::new(1).gaussian(0.0, 1.0, &[3, 6, 4]).unwrap();
        let (feat, _) = textcnn_forward(&x, &p).unwrap();
        assert_eq!(feat.shape(), &[3, 10]);
        assert!(feat.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_width_ones_kernel_pools_row_sums() {
        let p = TextCnnParams {
            widths: vec![1],
            kernels: vec![Tensor::ones(&[1, 3, 1])],
            biases: vec![Tensor::zeros(&[1])],
        };
        let x = Tensor::new(
            &[1, 4, 3],
            vec![1.0, 1.0, 1.0, 2.0, 2.0, -1.0, 0.5, 0.0, 0.0, 4.0, -1.0, -1.0],
        )
        .unwrap();
        let (feat, _) = textcnn_forward(&x, &p).unwrap();
        assert_eq!(feat.data(), &[3.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TextCnnParams::validate(&[3, 3], 2, 10).is_err());
        assert!(TextCnnParams::validate(&[4, 3], 2, 10).is_err());
        assert!(TextCnnParams::validate(&[3, 11], 2, 10).is_err());
        assert!(TextCnnParams::validate(&[3, 4, 5], 128, 59).is_ok());
        let p = TextCnnParams::he(&[2, 5], 3, 2, 8, &mut Rng::new(0)).unwrap();
        let short = Tensor::zeros(&[1, 4, 3]);
        assert_eq!(
            textcnn_forward(&short, &p).unwrap_err(),
            LayerError::SequenceTooShort { len: 4, width: 5 }
        );
    }

    /// True when some pooling winner is within `gap` of the runner-up or of
    /// the ReLU kink, where finite differences are unreliable.
    fn near_tie(x: &Tensor, p: &TextCnnParams, gap: f64) -> bool {
        let (b, len, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        for (wi, &w) in p.widths.iter().enumerate() {
            for s in 0..b {
                for f in 0..p.filters() {
                    let mut vals: Vec<f64> = (0..=len - w)
                        .map(|t| {
                            let mut acc = p.biases[wi].data()[f];
                            for k in 0..w * d {
                                acc += x.data()[s * len * d + t * d + k]
                                    * p.kernels[wi].data()[k * p.filters() + f];
                            }
                            acc
                        })
                        .collect();
                    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    if vals[0].abs() < gap || (vals.len() > 1 && vals[0] - vals[1] < gap) {
                        return true;
                    }
                }
            }
        }
        false
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut checked = 0;
        let mut seed = 0;
        while checked < 20 {
            seed += 1;
            let mut rng = Rng::new(500 + seed);
            let mut p = TextCnnParams::he(&[1, 2, 3], 3, 2, 5, &mut rng).unwrap();
            for bias in &mut p.biases {
                *bias = rng.gaussian(0.0, 0.3, bias.shape()).unwrap();
            }
            let x = rng.gaussian(0.0, 1.0, &[2, 5, 3]).unwrap();
            if near_tie(&x, &p, 1e-4) {
                continue;
            }
            let dy = rng.gaussian(0.0, 1.0, &[2, 6]).unwrap();
            let (_, cache) = textcnn_forward(&x, &p).unwrap();
            let (dx, g) = textcnn_backward(&dy, &cache, &p).unwrap();
            let nx = numeric_gradient(&x, DEFAULT_STEP, |x| {
                contract(&textcnn_forward(x, &p).unwrap().0, &dy)
            });
            assert!(max_relative_error(&dx, &nx, FLOOR, |_| false) <= 1e-5);
            for wi in 0..3 {
                let nk = numeric_gradient(&p.kernels[wi], DEFAULT_STEP, |k| {
                    let mut q = p.clone();
                    q.kernels[wi] = k.clone();
                    contract(&textcnn_forward(&x, &q).unwrap().0, &dy)
                });
                let nb = numeric_gradient(&p.biases[wi], DEFAULT_STEP, |bias| {
                    let mut q = p.clone();
                    q.biases[wi] = bias.clone();
                    contract(&textcnn_forward(&x, &q).unwrap().0, &dy)
                });
                assert!(max_relative_error(&g.kernels[wi], &nk, FLOOR, |_| false) <= 1e-5);
                assert!(max_relative_error(&g.biases[wi], &nb, FLOOR, |_| false) <= 1e-5);
            }
            checked += 1;
        }
    }

    #[test]
    fn padding_windows_contribute_nothing() {
        // With zero bias, windows entirely inside zero padding respond with 0,
        // which the ReLU already floors, so extra padding changes nothing.
        let mut rng = Rng::new(12);
        let p = TextCnnParams::he(&[2], 3, 4, 4, &mut rng).unwrap();
        let words = rng.gaussian(0.0, 1.0, &[6]).unwrap();
        let mut short = Tensor::zeros(&[1, 4, 3]);
        let mut long = Tensor::zeros(&[1, 9, 3]);
        short.data_mut()[..6].copy_from_slice(words.data());
        long.data_mut()[..6].copy_from_slice(words.data());
        let (a, _) = textcnn_forward(&short, &p).unwrap();
        let (b, _) = textcnn_forward(&long, &p).unwrap();
        assert_eq!(a, b);
    }
}
