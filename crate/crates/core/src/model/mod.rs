//! Windowed autoencoder anomaly detector.
//!
//! Windows of `n_metrics x w` values are flattened metric-major and pushed
//! through a symmetric fully connected autoencoder; the anomaly score of a
//! window is the mean squared error between input and reconstruction,
//! assigned to the window's last timestep. Training minimizes the same MSE
//! with Adam; a model can start from scratch or from another model's
//! parameters (transfer), in which case it gets a much smaller epoch budget.

mod adam;
mod format;
mod net;
mod train;

pub use adam::Adam;
pub use format::{load_model, save_model, FormatError};
pub use net::{Autoencoder, Gradients};
pub use train::{gradient_check, score, train, transfer_train};

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad shape: {0}")]
    BadShape(String),
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at epoch {epoch} (train={train_loss}, val={val_loss:?})")]
    NonFiniteLoss {
        epoch: usize,
        train_loss: f64,
        val_loss: Option<f64>,
    },
    #[error("no training windows")]
    EmptyWindows,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed in terms of the activated value.
    pub(crate) fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Hyperparameters of one autoencoder training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub window_size: usize,
    /// Encoder depth; the decoder mirrors it.
    pub num_layers: usize,
    /// Bottleneck width; must stay below the flattened input dimension.
    pub hidden_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Full from-scratch epoch budget `L`.
    pub max_epochs: usize,
    /// Fine-tuning epoch budget `l` for transfer-initialized models.
    pub transfer_max_epochs: usize,
    pub early_stopping: bool,
    pub early_stop_patience: usize,
    /// Relative validation-loss improvement below which an epoch counts as
    /// stalled.
    pub early_stop_min_delta: f64,
    pub activation: Activation,
    pub seed: u64,
}

impl AutoencoderConfig {
    /// Encoder/decoder layer widths for a given input dimension.
    ///
    /// Interior widths interpolate geometrically between the input dimension
    /// and the bottleneck: width_i = round(d0 * (hidden/d0)^(i/num_layers)),
    /// clamped monotone. The decoder mirrors the encoder, so the full chain
    /// has `2 * num_layers + 1` entries starting and ending at `d0`.
    pub fn layer_widths(&self, input_dim: usize) -> Result<Vec<usize>, ModelError> {
        if input_dim == 0 {
            return Err(ModelError::BadShape("input dimension is zero".into()));
        }
        if self.hidden_size >= input_dim {
            return Err(ModelError::BadShape(format!(
                "hidden_size {} must be below the input dimension {input_dim}",
                self.hidden_size
            )));
        }
        if self.num_layers == 0 {
            return Err(ModelError::BadShape("num_layers is zero".into()));
        }
        let d0 = input_dim as f64;
        let ratio = self.hidden_size as f64 / d0;
        let mut encoder = Vec::with_capacity(self.num_layers);
        let mut prev = input_dim;
        for i in 1..=self.num_layers {
            let ideal = d0 * ratio.powf(i as f64 / self.num_layers as f64);
            let width = (ideal.round() as usize).clamp(self.hidden_size, prev);
            encoder.push(width);
            prev = width;
        }
        *encoder.last_mut().expect("num_layers >= 1") = self.hidden_size;

        let mut widths = Vec::with_capacity(2 * self.num_layers + 1);
        widths.push(input_dim);
        widths.extend(&encoder);
        widths.extend(encoder.iter().rev().skip(1));
        widths.push(input_dim);
        Ok(widths)
    }

    pub(crate) fn same_architecture(&self, other: &AutoencoderConfig) -> bool {
        self.window_size == other.window_size
            && self.num_layers == other.num_layers
            && self.hidden_size == other.hidden_size
            && self.activation == other.activation
    }
}

/// Per-metric min/max computed on the model's own training windows and
/// applied to every window the model sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl Normalization {
    /// Fit per-metric stats over a set of flattened metric-major windows.
    pub fn fit(windows: &crate::data::WindowSet) -> Self {
        let m = windows.n_metrics;
        let w = windows.w;
        let mut mins = vec![f64::INFINITY; m];
        let mut maxs = vec![f64::NEG_INFINITY; m];
        for win in windows.iter() {
            for metric in 0..m {
                for &v in &win[metric * w..(metric + 1) * w] {
                    mins[metric] = mins[metric].min(v);
                    maxs[metric] = maxs[metric].max(v);
                }
            }
        }
        Self { mins, maxs }
    }

    /// Map a flattened window into normalized space; constant metrics map
    /// to zero.
    pub fn apply(&self, window: &[f64], w: usize, out: &mut Vec<f64>) {
        out.clear();
        out.reserve(window.len());
        for (metric, chunk) in window.chunks(w).enumerate() {
            let range = self.maxs[metric] - self.mins[metric];
            if range > 0.0 {
                out.extend(chunk.iter().map(|v| (v - self.mins[metric]) / range));
            } else {
                out.extend(std::iter::repeat(0.0).take(chunk.len()));
            }
        }
    }
}

/// What produced a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: String,
    pub source_model_id: Option<String>,
    pub epochs_run: usize,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    /// Training wall time. Not serialized: model files stay byte-identical
    /// across reruns; timing lives in the strategy cost report.
    #[serde(skip)]
    pub wall_time: Option<Duration>,
}

impl Provenance {
    fn fresh() -> Self {
        Self {
            strategy: "init".to_string(),
            source_model_id: None,
            epochs_run: 0,
            final_train_loss: None,
            final_val_loss: None,
            wall_time: None,
        }
    }
}

/// An autoencoder plus everything needed to reproduce and apply it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub id: String,
    pub config: AutoencoderConfig,
    pub n_metrics: usize,
    pub net: Autoencoder,
    pub normalization: Option<Normalization>,
    pub provenance: Provenance,
}

impl TrainedModel {
    pub fn input_dim(&self) -> usize {
        self.n_metrics * self.config.window_size
    }

    /// Canonical little-endian bytes of all parameters, for byte-level
    /// equality checks between models.
    pub fn param_bytes(&self) -> Vec<u8> {
        self.net.param_bytes()
    }
}

/// Deterministically initialize an untrained model.
///
/// Weights draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) in a fixed order,
/// biases start at zero; the same seed always yields bit-identical
/// parameters.
pub fn init_model(
    config: &AutoencoderConfig,
    n_metrics: usize,
    seed: u64,
) -> Result<TrainedModel, ModelError> {
    let input_dim = n_metrics * config.window_size;
    let widths = config.layer_widths(input_dim)?;
    let net = Autoencoder::init(&widths, config.activation, seed);
    let mut config = config.clone();
    config.seed = seed;
    Ok(TrainedModel {
        id: String::new(),
        config,
        n_metrics,
        net,
        normalization: None,
        provenance: Provenance::fresh(),
    })
}

/// Anomaly scores aligned to source timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    pub device_id: String,
    /// One score per scored timestep; entry `i` belongs to timestep
    /// `i + w - 1` (last-step alignment), so the first `w - 1` timesteps of
    /// the series are unscored.
    pub scores: Vec<f64>,
    pub window_size: usize,
}

impl ScoreSeries {
    /// Timestep in the source series that `scores[i]` belongs to.
    pub fn timestep_of(&self, i: usize) -> usize {
        i + self.window_size - 1
    }

    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::with_capacity(self.scores.len() * 24);
        for (i, s) in self.scores.iter().enumerate() {
            let _ = writeln!(out, "{},{s:.16e}", self.timestep_of(i));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> AutoencoderConfig {
        AutoencoderConfig {
            window_size: 10,
            num_layers: 2,
            hidden_size: 8,
            batch_size: 16,
            learning_rate: 1e-3,
            max_epochs: 10,
            transfer_max_epochs: 5,
            early_stopping: false,
            early_stop_patience: 5,
            early_stop_min_delta: 1e-3,
            activation: Activation::Tanh,
            seed: 1,
        }
    }

    #[test]
    fn layer_widths_follow_documented_rule() {
        // d0 = 40, hidden = 8, two encoder layers: interior width is
        // round(40 * sqrt(8/40)) = 18.
        let cfg = AutoencoderConfig {
            window_size: 10,
            ..config()
        };
        let widths = cfg.layer_widths(40).unwrap();
        assert_eq!(widths, vec![40, 18, 8, 18, 40]);
    }

    #[test]
    fn layer_widths_single_layer() {
        let cfg = AutoencoderConfig {
            num_layers: 1,
            ..config()
        };
        assert_eq!(cfg.layer_widths(40).unwrap(), vec![40, 8, 40]);
    }

    #[test]
    fn layer_widths_monotone_for_deep_nets() {
        let cfg = AutoencoderConfig {
            num_layers: 4,
            hidden_size: 3,
            ..config()
        };
        let widths = cfg.layer_widths(100).unwrap();
        assert_eq!(widths.len(), 9);
        assert_eq!(widths[4], 3);
        for pair in widths[..5].windows(2) {
            assert!(pair[0] >= pair[1], "encoder must narrow: {widths:?}");
        }
    }

    #[test]
    fn oversized_bottleneck_is_rejected() {
        let cfg = AutoencoderConfig {
            hidden_size: 41,
            ..config()
        };
        assert!(matches!(cfg.layer_widths(40), Err(ModelError::BadShape(_))));
        assert!(matches!(
            init_model(&cfg, 4, 1),
            Err(ModelError::BadShape(_))
        ));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = config();
        let a = init_model(&cfg, 4, 99).unwrap();
        let b = init_model(&cfg, 4, 99).unwrap();
        assert_eq!(a.param_bytes(), b.param_bytes());
        let c = init_model(&cfg, 4, 100).unwrap();
        assert_ne!(a.param_bytes(), c.param_bytes());
    }

    #[test]
    fn score_alignment() {
        let s = ScoreSeries {
            device_id: "d".into(),
            scores: vec![0.0; 5],
            window_size: 3,
        };
        assert_eq!(s.timestep_of(0), 2);
        assert_eq!(s.timestep_of(4), 6);
    }
}
