//! Pipeline configuration.
//!
//! One plain-text file with `[section]` key-value pairs (TOML syntax) drives
//! every stage. All fields have defaults, so an empty file is a valid
//! configuration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Activation, AutoencoderConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub similarity: SimilarityConfig,
    pub clustering: ClusteringConfig,
    pub model: ModelConfig,
    pub strategy: StrategyConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root directory.
    pub root: String,
    /// `smd_like` (train/, test/, test_label/ subdirectories) or
    /// `single_dir` (train files only).
    pub layout: String,
    /// `reject` or `forward_fill`.
    pub missing_values: String,
    /// When true, range scaling also subtracts the global minimum; the
    /// default divides by the range only.
    pub full_minmax: bool,
    pub top_n: usize,
    pub zero_fraction_limit: f64,
    pub collinearity_threshold: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: "data".to_string(),
            layout: "smd_like".to_string(),
            missing_values: "reject".to_string(),
            full_minmax: false,
            top_n: 6,
            zero_fraction_limit: 0.5,
            collinearity_threshold: 0.95,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityConfig {
    /// Histogram bin count shared across devices.
    pub bins: usize,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self { bins: 100 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub k: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self { k: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub window_size: usize,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub transfer_max_epochs: usize,
    pub early_stopping: bool,
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,
    /// `tanh` or `relu`; hidden layers only, the output layer is linear.
    pub activation: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window_size: 10,
            num_layers: 2,
            hidden_size: 8,
            batch_size: 64,
            learning_rate: 1e-3,
            max_epochs: 50,
            transfer_max_epochs: 20,
            early_stopping: true,
            early_stop_patience: 5,
            early_stop_min_delta: 1e-3,
            activation: "tanh".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    /// Global seed; every random draw in the pipeline derives from it.
    pub seed: u64,
    /// Stride for training windows (scoring always uses stride 1).
    pub train_stride: usize,
    /// Chronological fraction of each device's windows held out for
    /// validation.
    pub val_fraction: f64,
    /// Cluster-membership Jaccard change above which a `cm` cluster model is
    /// retrained after a fleet event.
    pub cm_retrain_jaccard: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            train_stride: 1,
            val_fraction: 0.1,
            cm_retrain_jaccard: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// `pointwise` or `point_adjust`.
    pub f1_mode: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            f1_mode: "pointwise".to_string(),
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            similarity: SimilarityConfig::default(),
            clustering: ClusteringConfig::default(),
            model: ModelConfig::default(),
            strategy: StrategyConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Build the per-model autoencoder configuration. The seed is filled in
    /// later, per model, by the strategy runner.
    pub fn autoencoder_config(&self) -> Result<AutoencoderConfig, ConfigError> {
        let activation = match self.model.activation.as_str() {
            "tanh" => Activation::Tanh,
            "relu" => Activation::Relu,
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown activation `{other}` (expected tanh or relu)"
                )))
            }
        };
        Ok(AutoencoderConfig {
            window_size: self.model.window_size,
            num_layers: self.model.num_layers,
            hidden_size: self.model.hidden_size,
            batch_size: self.model.batch_size,
            learning_rate: self.model.learning_rate,
            max_epochs: self.model.max_epochs,
            transfer_max_epochs: self.model.transfer_max_epochs,
            early_stopping: self.model.early_stopping,
            early_stop_patience: self.model.early_stop_patience,
            early_stop_min_delta: self.model.early_stop_min_delta,
            activation,
            seed: 0,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |msg: String| Err(ConfigError::Invalid(msg));
        match self.data.layout.as_str() {
            "smd_like" | "single_dir" => {}
            other => return err(format!("unknown layout `{other}`")),
        }
        match self.data.missing_values.as_str() {
            "reject" | "forward_fill" => {}
            other => return err(format!("unknown missing_values policy `{other}`")),
        }
        if self.data.top_n == 0 {
            return err("data.top_n must be positive".into());
        }
        if !(0.0 < self.data.zero_fraction_limit && self.data.zero_fraction_limit <= 1.0) {
            return err("data.zero_fraction_limit must be in (0, 1]".into());
        }
        if !(0.0 < self.data.collinearity_threshold && self.data.collinearity_threshold <= 1.0) {
            return err("data.collinearity_threshold must be in (0, 1]".into());
        }
        if self.similarity.bins < 2 {
            return err("similarity.bins must be at least 2".into());
        }
        if self.clustering.k == 0 {
            return err("clustering.k must be positive".into());
        }
        let m = &self.model;
        if m.window_size == 0
            || m.num_layers == 0
            || m.hidden_size == 0
            || m.batch_size == 0
            || m.early_stop_patience == 0
        {
            return err("model sizes, batch size and patience must be positive".into());
        }
        if m.learning_rate <= 0.0 || m.early_stop_min_delta <= 0.0 {
            return err("model.learning_rate and early_stop_min_delta must be positive".into());
        }
        if m.transfer_max_epochs > m.max_epochs {
            return err("model.transfer_max_epochs must not exceed max_epochs".into());
        }
        if self.strategy.train_stride == 0 {
            return err("strategy.train_stride must be positive".into());
        }
        if !(0.0..1.0).contains(&self.strategy.val_fraction) {
            return err("strategy.val_fraction must be in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.strategy.cm_retrain_jaccard) {
            return err("strategy.cm_retrain_jaccard must be in [0, 1]".into());
        }
        match self.eval.f1_mode.as_str() {
            "pointwise" | "point_adjust" => {}
            other => return err(format!("unknown f1_mode `{other}`")),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let cfg = PipelineConfig::from_str("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
    }

    #[test]
    fn roundtrips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml();
        assert_eq!(PipelineConfig::from_str(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides_apply() {
        let cfg = PipelineConfig::from_str("[clustering]\nk = 3\n[similarity]\nbins = 40\n").unwrap();
        assert_eq!(cfg.clustering.k, 3);
        assert_eq!(cfg.similarity.bins, 40);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(PipelineConfig::from_str("[data]\nlayout = \"zip\"\n").is_err());
        assert!(PipelineConfig::from_str("[model]\ntransfer_max_epochs = 99\n").is_err());
        assert!(PipelineConfig::from_str("[data]\nunknown_key = 1\n").is_err());
    }
}
