//! Forward and backward passes for every layer and loss in the network.
//!
//! Each layer is a pair of free functions: `*_forward` returns the output and
//! a cache of whatever the matching `*_backward` needs. Backward passes are
//! hand-derived and checked against central finite differences in the tests.

mod dense;
mod loss;
mod norm;
mod textcnn;

pub use dense::{
    dropout_backward, dropout_forward, fc_backward, fc_forward, grl_backward, grl_forward,
    relu_backward, relu_forward, DropoutCache, FcCache, FcParams, ReluCache,
};
pub use loss::{sigmoid, sigmoid_xent, triplet_ranking_loss, TripletGrads};
pub use norm::{
    batchnorm_backward, batchnorm_forward, l2norm_backward, l2norm_forward, BatchNormCache,
    BatchNormParams, L2NormCache, RunningStats, BN_EPSILON, L2_EPSILON,
};
pub use textcnn::{textcnn_backward, textcnn_forward, TextCnnCache, TextCnnParams};

use serde::{Deserialize, Serialize};

/// Train mode enables dropout noise and batch statistics; eval mode is
/// deterministic and uses running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}
