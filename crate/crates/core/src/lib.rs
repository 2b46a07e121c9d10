//! Adversarial image-text multi-modal embedding.
//!
//! Two embedding branches (fully-connected for image features, a sentence CNN
//! for word-vector sequences) map both modalities into one `D`-dimensional
//! space. A multi-label category head keeps the space discriminative, and a
//! domain classifier behind a gradient reversal layer pushes the two
//! modalities' distributions together. Training never looks at image-text
//! pairing; pairs are only used for evaluation and the triplet baseline.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{
    CheckpointError, DataError, EvalError, LayerError, ModelError, OptimError, TensorError,
    TrainError,
};
pub use rng::Rng;
pub use tensor::Tensor;
