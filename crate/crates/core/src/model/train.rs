//! Training, transfer fine-tuning, scoring, and the finite-difference
//! gradient check.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::WindowSet;
use crate::seed;

use super::{Adam, Autoencoder, ModelError, Normalization, ScoreSeries, TrainedModel};

/// Normalize every window of a set into a flat buffer.
fn normalize_all(norm: &Normalization, windows: &WindowSet) -> Vec<Vec<f64>> {
    let mut buffer = Vec::new();
    windows
        .iter()
        .map(|win| {
            norm.apply(win, windows.w, &mut buffer);
            buffer.clone()
        })
        .collect()
}

fn full_loss(net: &Autoencoder, samples: &[Vec<f64>]) -> f64 {
    let refs: Vec<&[f64]> = samples.iter().map(Vec::as_slice).collect();
    net.batch_loss(&refs)
}

/// Train with mini-batch Adam on MSE reconstruction loss.
///
/// Runs at most `epoch_budget` epochs. With early stopping enabled and a
/// non-empty validation set, training stops once the relative improvement of
/// the validation loss over the best seen stays below
/// `early_stop_min_delta` for `early_stop_patience` consecutive epochs.
/// Normalization stats are fit on the training windows here, so even a
/// zero-epoch budget leaves the model ready to score.
pub fn train(
    mut model: TrainedModel,
    train_windows: &WindowSet,
    val_windows: Option<&WindowSet>,
    epoch_budget: usize,
) -> Result<TrainedModel, ModelError> {
    if train_windows.is_empty() {
        return Err(ModelError::EmptyWindows);
    }
    if train_windows.dim() != model.input_dim() {
        return Err(ModelError::ShapeMismatch(format!(
            "training windows have dim {}, model expects {}",
            train_windows.dim(),
            model.input_dim()
        )));
    }
    if let Some(val) = val_windows {
        if !val.is_empty() && val.dim() != model.input_dim() {
            return Err(ModelError::ShapeMismatch(format!(
                "validation windows have dim {}, model expects {}",
                val.dim(),
                model.input_dim()
            )));
        }
    }

    let started = Instant::now();
    let norm = Normalization::fit(train_windows);
    let train_samples = normalize_all(&norm, train_windows);
    let val_samples: Vec<Vec<f64>> = val_windows
        .filter(|v| !v.is_empty())
        .map(|v| normalize_all(&norm, v))
        .unwrap_or_default();

    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "batch-order"));
    let mut adam = Adam::new(&model.net, cfg.learning_rate);
    let mut indices: Vec<usize> = (0..train_samples.len()).collect();

    let mut epochs_run = 0;
    let mut best_val = f64::INFINITY;
    let mut stall_streak = 0;
    let mut train_loss = full_loss(&model.net, &train_samples);
    let mut val_loss = if val_samples.is_empty() {
        None
    } else {
        Some(full_loss(&model.net, &val_samples))
    };

    for epoch in 1..=epoch_budget {
        indices.shuffle(&mut rng);
        for batch_ids in indices.chunks(cfg.batch_size) {
            let batch: Vec<&[f64]> = batch_ids
                .iter()
                .map(|&i| train_samples[i].as_slice())
                .collect();
            let (_, grads) = model.net.batch_gradients(&batch);
            adam.step(&mut model.net, &grads);
        }
        epochs_run = epoch;

        train_loss = full_loss(&model.net, &train_samples);
        val_loss = if val_samples.is_empty() {
            None
        } else {
            Some(full_loss(&model.net, &val_samples))
        };
        if !train_loss.is_finite() || val_loss.is_some_and(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteLoss {
                epoch,
                train_loss,
                val_loss,
            });
        }

        if cfg.early_stopping {
            if let Some(val) = val_loss {
                let improvement = if best_val.is_finite() {
                    (best_val - val) / best_val.max(f64::MIN_POSITIVE)
                } else {
                    f64::INFINITY // first epoch always counts as progress
                };
                if improvement < cfg.early_stop_min_delta {
                    stall_streak += 1;
                } else {
                    stall_streak = 0;
                }
                best_val = best_val.min(val);
                if stall_streak >= cfg.early_stop_patience {
                    break;
                }
            }
        }
    }

    model.normalization = Some(norm);
    model.provenance.epochs_run = epochs_run;
    model.provenance.final_train_loss = Some(train_loss);
    model.provenance.final_val_loss = val_loss;
    model.provenance.wall_time = Some(started.elapsed());
    Ok(model)
}

/// Fine-tune a copy of `source` on a new device's windows.
///
/// Parameters are copied wholesale; normalization stats are re-fit on the
/// target windows; the epoch budget is the short `transfer_max_epochs`.
pub fn transfer_train(
    source: &TrainedModel,
    target_id: &str,
    train_windows: &WindowSet,
    val_windows: Option<&WindowSet>,
    config: &super::AutoencoderConfig,
) -> Result<TrainedModel, ModelError> {
    if !source.config.same_architecture(config) {
        return Err(ModelError::ArchitectureMismatch(format!(
            "source {} has a different architecture",
            source.id
        )));
    }
    if source.n_metrics * source.config.window_size != train_windows.dim() {
        return Err(ModelError::ArchitectureMismatch(format!(
            "source input dim {} vs target windows {}",
            source.n_metrics * source.config.window_size,
            train_windows.dim()
        )));
    }
    let model = TrainedModel {
        id: target_id.to_string(),
        config: config.clone(),
        n_metrics: source.n_metrics,
        net: source.net.clone(),
        normalization: None,
        provenance: super::Provenance {
            strategy: source.provenance.strategy.clone(),
            source_model_id: Some(source.id.clone()),
            epochs_run: 0,
            final_train_loss: None,
            final_val_loss: None,
            wall_time: None,
        },
    };
    let budget = config.transfer_max_epochs;
    train(model, train_windows, val_windows, budget)
}

/// Score windows by reconstruction MSE, assigned to each window's last
/// timestep. Requires stride-1 windows so scores line up with timesteps.
pub fn score(
    model: &TrainedModel,
    device_id: &str,
    windows: &WindowSet,
) -> Result<ScoreSeries, ModelError> {
    if windows.stride != 1 {
        return Err(ModelError::ShapeMismatch(format!(
            "scoring requires stride 1, got {}",
            windows.stride
        )));
    }
    if windows.dim() != model.input_dim() {
        return Err(ModelError::ShapeMismatch(format!(
            "windows have dim {}, model expects {}",
            windows.dim(),
            model.input_dim()
        )));
    }
    let mut buffer = Vec::new();
    let scores = windows
        .iter()
        .map(|win| match &model.normalization {
            Some(norm) => {
                norm.apply(win, windows.w, &mut buffer);
                model.net.reconstruction_mse(&buffer)
            }
            None => model.net.reconstruction_mse(win),
        })
        .collect();
    Ok(ScoreSeries {
        device_id: device_id.to_string(),
        scores,
        window_size: windows.w,
    })
}

/// Compare analytic gradients with central finite differences.
///
/// Returns the maximum over parameters of
/// `|ga - gn| / (|ga| + |gn| + 1e-6)`.
pub fn gradient_check(model: &TrainedModel, window: &[f64], fd_step: f64) -> f64 {
    let mut net = model.net.clone();
    let batch: Vec<&[f64]> = vec![window];
    let (_, grads) = net.batch_gradients(&batch);
    let analytic = Autoencoder::flatten_gradients(&grads);

    let mut worst: f64 = 0.0;
    for (i, &ga) in analytic.iter().enumerate() {
        let saved = net.get_param(i);
        net.set_param(i, saved + fd_step);
        let up = net.batch_loss(&batch);
        net.set_param(i, saved - fd_step);
        let down = net.batch_loss(&batch);
        net.set_param(i, saved);
        let gn = (up - down) / (2.0 * fd_step);
        let rel = (ga - gn).abs() / (ga.abs() + gn.abs() + 1e-6);
        worst = worst.max(rel);
    }
    worst
}
