use std::fs;
use std::path::Path;

use advmm::data::{FeatureHeader, SynthSpec};
use advmm::eval::Metric;
use advmm::model::ModelConfig;
use advmm::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub metric: Metric,
    /// Split scored by `eval`, `search` and `export`.
    pub split: String,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            metric: Metric::Cosine,
            split: "test".into(),
        }
    }
}

/// Everything a run can be configured with. Written back out, it reproduces
/// the run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies the seed everywhere it is consumed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    /// Input dimensions always follow the data.
    pub fn adopt_header(&mut self, h: &FeatureHeader) {
        self.model.d_image_in = h.d_image_in;
        self.model.d_word = h.d_word;
        self.model.max_len = h.max_len;
        self.model.n_categories = h.n_categories;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes `effective_config.toml` into `out`.
    pub fn echo(&self, out: &Path) -> Result<(), CliError> {
        fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        let path = out.join("effective_config.toml");
        fs::write(&path, self.to_toml()).map_err(|e| CliError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.train.lambda_override = Some(0.25);
        c.train.checkpoint = Some("out/checkpoint.json".into());
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_and_unknown_keys() {
        let c: RunConfig = toml::from_str("seed = 3\n[train]\nmax_steps = 7\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.max_steps, 7);
        assert_eq!(c.model, ModelConfig::default());
        assert!(toml::from_str::<RunConfig>("[train]\nmax_step = 7\n").is_err());
    }
}
