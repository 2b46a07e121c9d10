//! Synthetic paired image/text data under covariate shift.
//!
//! Every pair starts from one latent `z ~ N(0, I_Z)`. Labels come from `C`
//! fixed random hyperplanes, `label_c = [w_c·z > 0]`, and are shared by both
//! modalities. The image view is `tanh(z·A) + σ_img·ε` in `d_image`
//! dimensions; the text view is a variable-length sequence of word vectors
//! `tanh(z·(B + jitter·E_t)) + σ_txt·ε`, zero-padded to `max_len` rows. The
//! two views therefore share a labeling function but have unrelated marginal
//! distributions and even different shapes.

use serde::{Deserialize, Serialize};

use super::{Dataset, Domain, FeatureHeader, Sample};
use crate::error::DataError;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub latent_dim: usize,
    pub n_categories: usize,
    /// Total number of image/text pairs across both splits.
    pub n_pairs: usize,
    pub test_fraction: f64,
    pub d_image: usize,
    pub image_noise: f64,
    pub d_word: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub text_noise: f64,
    /// Scale of the per-position perturbation of the text map.
    pub position_jitter: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            n_categories: 8,
            n_pairs: 4000,
            test_fraction: 0.2,
            d_image: 64,
            image_noise: 0.1,
            d_word: 16,
            min_len: 4,
            max_len: 12,
            text_noise: 0.1,
            position_jitter: 0.3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |field, message: &str| {
            Err(DataError::Spec {
                field,
                message: message.to_string(),
            })
        };
        for (field, v) in [
            ("latent_dim", self.latent_dim),
            ("n_categories", self.n_categories),
            ("n_pairs", self.n_pairs),
            ("d_image", self.d_image),
            ("d_word", self.d_word),
            ("min_len", self.min_len),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return err(field, "must be at least 1");
            }
        }
        if self.min_len > self.max_len {
            return err("min_len", "must not exceed max_len");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return err("test_fraction", "must be in [0, 1)");
        }
        for (field, v) in [
            ("image_noise", self.image_noise),
            ("text_noise", self.text_noise),
            ("position_jitter", self.position_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(field, "must be finite and non-negative");
            }
        }
        Ok(())
    }

    pub fn header(&self) -> FeatureHeader {
        FeatureHeader::new(self.n_categories, self.d_image, self.max_len, self.d_word)
    }

    pub fn n_test(&self) -> usize {
        (self.n_pairs as f64 * self.test_fraction).round() as usize
    }
}

/// The fixed random maps behind a synthetic dataset. Fields are public so
/// tests can substitute hand-built maps.
#[derive(Debug, Clone)]
pub struct SynthGenerator {
    pub spec: SynthSpec,
    /// `[Z × d_image]`
    pub image_map: Tensor,
    /// `[Z × d_word]`
    pub text_map: Tensor,
    /// `max_len` perturbations, each `[Z × d_word]`.
    pub position_maps: Vec<Tensor>,
    /// `[Z × C]`, one hyperplane normal per column.
    pub label_planes: Tensor,
}

impl SynthGenerator {
    pub fn new(spec: &SynthSpec, rng: &mut Rng) -> Result<Self, DataError> {
        spec.validate()?;
        let z = spec.latent_dim;
        let scale = 1.0 / (z as f64).sqrt();
        let draw = |rng: &mut Rng, cols: usize| {
            rng.gaussian(0.0, scale, &[z, cols]).expect("positive std")
        };
        let image_map = draw(rng, spec.d_image);
        let text_map = draw(rng, spec.d_word);
        let position_maps = (0..spec.max_len).map(|_| draw(rng, spec.d_word)).collect();
        let label_planes = rng
            .gaussian(0.0, 1.0, &[z, spec.n_categories])
            .expect("positive std");
        Ok(Self {
            spec: spec.clone(),
            image_map,
            text_map,
            position_maps,
            label_planes,
        })
    }

    /// Multi-hot labels of latent `z` under the hyperplane rule.
    pub fn labels_for(&self, z: &[f64]) -> Tensor {
        let zt = Tensor::new(&[1, z.len()], z.to_vec()).expect("latent row");
        zt.matmul(&self.label_planes)
            .expect("latent width matches")
            .map(|v| if v > 0.0 { 1.0 } else { 0.0 })
            .reshape(&[self.spec.n_categories])
            .expect("C labels")
    }

    /// Draws latents until the labeling rule yields at least one positive.
    pub fn draw_latent(&self, rng: &mut Rng) -> (Vec<f64>, Tensor) {
        loop {
            let z: Vec<f64> = (0..self.spec.latent_dim)
                .map(|_| rng.standard_normal())
                .collect();
            let labels = self.labels_for(&z);
            if labels.sum() > 0.0 {
                return (z, labels);
            }
        }
    }

    pub fn image_feature(&self, z: &[f64], rng: &mut Rng) -> Tensor {
        let zt = Tensor::new(&[1, z.len()], z.to_vec()).expect("latent row");
        let clean = zt.matmul(&self.image_map).expect("latent width matches");
        let sigma = self.spec.image_noise;
        let data = clean
            .data()
            .iter()
            .map(|&v| v.tanh() + sigma * rng.standard_normal())
            .collect();
        Tensor::from_vec(data)
    }

    /// `[max_len × d_word]`, rows at and beyond the drawn length are zero.
    pub fn text_feature(&self, z: &[f64], rng: &mut Rng) -> Tensor {
        let spec = &self.spec;
        let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
        let zt = Tensor::new(&[1, z.len()], z.to_vec()).expect("latent row");
        let mut out = Tensor::zeros(&[spec.max_len, spec.d_word]);
        for t in 0..len {
            let map = self
                .text_map
                .add(&self.position_maps[t].scale(spec.position_jitter))
                .expect("same shape");
            let word = zt.matmul(&map).expect("latent width matches");
            for (o, &v) in out.row_mut(t).iter_mut().zip(word.data()) {
                *o = v.tanh() + spec.text_noise * rng.standard_normal();
            }
        }
        out
    }

    /// Pair number `index`: `(image, text)` sharing labels and `pair_id`.
    pub fn make_pair(&self, index: usize, rng: &mut Rng) -> (Sample, Sample) {
        let (z, labels) = self.draw_latent(rng);
        let pair = format!("pair-{index:06}");
        let image = Sample {
            id: format!("img-{index:06}"),
            domain: Domain::Image,
            feature: self.image_feature(&z, rng),
            labels: labels.clone(),
            pair_id: Some(pair.clone()),
        };
        let text = Sample {
            id: format!("txt-{index:06}"),
            domain: Domain::Text,
            feature: self.text_feature(&z, rng),
            labels,
            pair_id: Some(pair),
        };
        (image, text)
    }
}

/// Generates train and test splits. Within each split, samples are ordered
/// image, text, image, text, ... by pair.
pub fn generate_synthetic(spec: &SynthSpec, rng: &mut Rng) -> Result<Dataset, DataError> {
    let generator = SynthGenerator::new(spec, rng)?;
    let n_test = spec.n_test();
    let n_train = spec.n_pairs - n_test;
    let mut train = Vec::with_capacity(2 * n_train);
    let mut test = Vec::with_capacity(2 * n_test);
    for i in 0..spec.n_pairs {
        let (img, txt) = generator.make_pair(i, rng);
        let split = if i < n_train { &mut train } else { &mut test };
        split.push(img);
        split.push(txt);
    }
    Ok(Dataset {
        header: spec.header(),
        train,
        test,
    })
}
