//! Versioned JSON container for a training run.
//!
//! Floats are written with shortest round-trip formatting and parsed back
//! exactly, so save → load reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CheckpointError;
use crate::model::Model;
use crate::optim::AdamState;
use crate::trainer::{LogRecord, LossWindow, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub train_config: TrainConfig,
    /// Model configuration and every parameter tensor, including batch-norm
    /// running statistics.
    pub model: Model,
    pub adam: AdamState,
    /// Updates applied so far.
    pub step: u64,
    /// Mean pairwise held-out embedding distance before training.
    pub initial_distance: Option<f64>,
    pub history: Vec<LogRecord>,
    /// Losses accumulated since the last record.
    pub window: LossWindow,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        #[derive(Deserialize)]
        struct Probe {
            version: u32,
        }
        let probe: Probe =
            serde_json::from_str(text).map_err(|e| CheckpointError::Format(e.to_string()))?;
        if probe.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: probe.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        serde_json::from_str(text).map_err(|e| CheckpointError::Format(e.to_string()))
    }

    /// Writes to a sibling temporary file first, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, self.to_json()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}
