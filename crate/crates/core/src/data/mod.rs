//! Samples, synthetic covariate-shift data, the feature file format, and
//! batch iteration.

mod batch;
mod format;
mod synth;

pub use batch::{batch_iter, BatchStream, PartialBatch};
pub use format::{
    load_dataset_dir, load_features, load_split, save_dataset_dir, split_paths, write_features,
    FeatureHeader, FORMAT_VERSION,
};
pub use synth::{generate_synthetic, SynthGenerator, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Image,
    Text,
}

impl Domain {
    /// Binary target used by the domain classifier.
    pub fn target(self) -> f64 {
        match self {
            Domain::Image => 0.0,
            Domain::Text => 1.0,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Domain::Image => Domain::Text,
            Domain::Text => Domain::Image,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Image => "image",
            Domain::Text => "text",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "image" => Some(Domain::Image),
            "text" => Some(Domain::Text),
            _ => None,
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One data item. Image features are `[d_image_in]`, text features are
/// `[L × d_word]` word vectors zero-padded at the bottom to exactly `L` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub domain: Domain,
    pub feature: Tensor,
    /// Multi-hot `[C]`.
    pub labels: Tensor,
    /// Image-text pairing. Only evaluation and the triplet baseline read it.
    pub pair_id: Option<String>,
}

/// Train and held-out splits sharing one header.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: FeatureHeader,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// Copy with every `pair_id` removed.
    pub fn without_pairs(&self) -> Self {
        let strip = |s: &[Sample]| {
            s.iter()
                .cloned()
                .map(|mut x| {
                    x.pair_id = None;
                    x
                })
                .collect()
        };
        Self {
            header: self.header.clone(),
            train: strip(&self.train),
            test: strip(&self.test),
        }
    }
}

/// Counts of `(image, text)` samples.
pub fn domain_counts(samples: &[Sample]) -> (usize, usize) {
    samples.iter().fold((0, 0), |(i, t), s| match s.domain {
        Domain::Image => (i + 1, t),
        Domain::Text => (i, t + 1),
    })
}

/// Stacks the label vectors of `samples` into `[N × C]`.
pub fn label_matrix(samples: &[&Sample], n_categories: usize) -> Tensor {
    let mut data = Vec::with_capacity(samples.len() * n_categories);
    for s in samples {
        data.extend_from_slice(s.labels.data());
    }
    Tensor::new(&[samples.len(), n_categories], data).expect("labels are [C]")
}

/// `[N × 1]` domain targets.
pub fn domain_targets(samples: &[&Sample]) -> Tensor {
    Tensor::new(
        &[samples.len(), 1],
        samples.iter().map(|s| s.domain.target()).collect(),
    )
    .expect("one target per sample")
}
