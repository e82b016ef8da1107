//! Detection quality metrics and strategy comparison reports.
//!
//! AUC is computed from ranks (Mann-Whitney form, ties averaged), so it is
//! exact and needs no curve discretization. F1 sweeps a threshold over every
//! distinct score; the default mode scores each timestep independently,
//! while the optional point-adjust mode credits a whole labeled anomaly
//! segment once any point inside it is flagged.

pub mod synth;

use std::fmt::Write as _;

use thiserror::Error;

use crate::data::{make_windows, DataError, DeviceDataset, Split};
use crate::model::{score, ModelError, ScoreSeries};
use crate::strategies::{Strategy, StrategyRun};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("labels contain a single class")]
    SingleClass,
    #[error("scores and labels differ in length: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("device {0} has no labeled test split")]
    MissingTest(String),
    #[error("no model routed for device {0}")]
    MissingRoute(String),
    #[error("invalid fleet spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Invalid(String),
}

/// Rank-based ROC AUC with averaged ranks on ties.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Average 1-based rank of the tie run [i, j].
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }

    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum F1Mode {
    Pointwise,
    PointAdjust,
}

impl F1Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pointwise" => Some(F1Mode::Pointwise),
            "point_adjust" => Some(F1Mode::PointAdjust),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Result {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
}

/// Best F1 over a sweep of every distinct score as threshold (predict
/// anomalous when `score >= threshold`). Thresholds are visited in
/// descending order and only strict improvements are kept, so ties resolve
/// to the highest threshold.
pub fn best_f1(scores: &[f64], labels: &[u8], mode: F1Mode) -> Result<F1Result, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(EvalError::SingleClass);
    }

    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    thresholds.dedup();

    let mut best: Option<F1Result> = None;
    for &threshold in &thresholds {
        let mut predicted: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
        if mode == F1Mode::PointAdjust {
            adjust_segments(&mut predicted, labels);
        }
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (&pred, &label) in predicted.iter().zip(labels) {
            match (pred, label == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = tp as f64 / (tp + fn_) as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        if best.is_none() || f1 > best.expect("just checked").f1 {
            best = Some(F1Result {
                f1,
                precision,
                recall,
                threshold,
            });
        }
    }
    Ok(best.expect("at least one threshold"))
}

/// Point-adjust: if any point of a contiguous labeled segment is predicted,
/// mark the whole segment predicted.
fn adjust_segments(predicted: &mut [bool], labels: &[u8]) {
    let mut i = 0;
    while i < labels.len() {
        if labels[i] == 1 {
            let start = i;
            while i < labels.len() && labels[i] == 1 {
                i += 1;
            }
            if predicted[start..i].iter().any(|&p| p) {
                predicted[start..i].iter_mut().for_each(|p| *p = true);
            }
        } else {
            i += 1;
        }
    }
}

/// One device's metrics under one strategy run.
#[derive(Debug, Clone)]
pub struct DeviceEvaluation {
    pub strategy: Strategy,
    pub device_id: String,
    pub auc: f64,
    pub f1: F1Result,
    pub scores: ScoreSeries,
}

/// Score and evaluate every device of a run with its routed model.
pub fn evaluate_run(
    run: &StrategyRun,
    datasets: &[DeviceDataset],
    mode: F1Mode,
) -> Result<Vec<DeviceEvaluation>, EvalError> {
    let mut sorted: Vec<&DeviceDataset> = datasets.iter().collect();
    sorted.sort_by(|a, b| a.device_id.cmp(&b.device_id));
    #[cfg(feature = "parallel")]
    let results: Result<Vec<_>, _> = sorted
        .par_iter()
        .map(|ds| evaluate_device(run, ds, mode))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let results: Result<Vec<_>, _> = sorted
        .iter()
        .map(|ds| evaluate_device(run, ds, mode))
        .collect();
    results
}

/// Sequential twin of [`evaluate_run`] for benchmarks and scheduling tests.
pub fn evaluate_run_seq(
    run: &StrategyRun,
    datasets: &[DeviceDataset],
    mode: F1Mode,
) -> Result<Vec<DeviceEvaluation>, EvalError> {
    let mut sorted: Vec<&DeviceDataset> = datasets.iter().collect();
    sorted.sort_by(|a, b| a.device_id.cmp(&b.device_id));
    sorted
        .iter()
        .map(|ds| evaluate_device(run, ds, mode))
        .collect()
}

pub fn evaluate_device(
    run: &StrategyRun,
    dataset: &DeviceDataset,
    mode: F1Mode,
) -> Result<DeviceEvaluation, EvalError> {
    let labels = dataset
        .test_labels
        .as_ref()
        .ok_or_else(|| EvalError::MissingTest(dataset.device_id.clone()))?;
    let model_key = run
        .routing
        .get(&dataset.device_id)
        .ok_or_else(|| EvalError::MissingRoute(dataset.device_id.clone()))?;
    let model = run
        .models
        .get(model_key)
        .ok_or_else(|| EvalError::MissingRoute(model_key.clone()))?;

    let w = model.config.window_size;
    let windows = make_windows(dataset, Split::Test, w, 1)?;
    let series = score(model, &dataset.device_id, &windows)?;
    // First w-1 timesteps are unscored; drop their labels too.
    let aligned = &labels[w - 1..];
    let auc = roc_auc(&series.scores, aligned)?;
    let f1 = best_f1(&series.scores, aligned, mode)?;
    Ok(DeviceEvaluation {
        strategy: run.strategy,
        device_id: dataset.device_id.clone(),
        auc,
        f1,
        scores: series,
    })
}

/// Per-strategy aggregate over devices.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyAggregate {
    pub strategy: Strategy,
    pub mean_auc: f64,
    pub mean_f1: f64,
    pub models_trained: usize,
    pub total_epochs: usize,
    pub wall_ms: u128,
}

#[derive(Debug, Clone)]
pub struct EvaluationReport {
    pub rows: Vec<DeviceEvaluation>,
    pub aggregates: Vec<StrategyAggregate>,
}

impl EvaluationReport {
    pub fn aggregate_for(&self, strategy: Strategy) -> Option<&StrategyAggregate> {
        self.aggregates.iter().find(|a| a.strategy == strategy)
    }

    /// Machine-readable lines: one per (strategy, device), then one footer
    /// per strategy. Byte-deterministic for identical inputs.
    pub fn machine_text(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.16e}",
                row.strategy,
                row.device_id,
                row.auc,
                row.f1.f1,
                row.f1.precision,
                row.f1.recall,
                row.f1.threshold
            );
        }
        for agg in &self.aggregates {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{},{},{}",
                agg.strategy,
                agg.mean_auc,
                agg.mean_f1,
                agg.models_trained,
                agg.total_epochs,
                agg.wall_ms
            );
        }
        out
    }

    pub fn human_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:<12} {:>8} {:>8} {:>10} {:>8}",
            "strategy", "device", "auc", "f1", "precision", "recall"
        );
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{:<8} {:<12} {:>8.4} {:>8.4} {:>10.4} {:>8.4}",
                row.strategy.as_str(),
                row.device_id,
                row.auc,
                row.f1.f1,
                row.f1.precision,
                row.f1.recall
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<8} {:>9} {:>9} {:>7} {:>7} {:>9}",
            "strategy", "mean_auc", "mean_f1", "models", "epochs", "wall_ms"
        );
        for agg in &self.aggregates {
            let _ = writeln!(
                out,
                "{:<8} {:>9.4} {:>9.4} {:>7} {:>7} {:>9}",
                agg.strategy.as_str(),
                agg.mean_auc,
                agg.mean_f1,
                agg.models_trained,
                agg.total_epochs,
                agg.wall_ms
            );
        }
        out
    }
}

/// Evaluate several strategy runs against the same fleet and aggregate.
pub fn compare_strategies(
    runs: &[StrategyRun],
    datasets: &[DeviceDataset],
    mode: F1Mode,
) -> Result<EvaluationReport, EvalError> {
    let mut rows = Vec::new();
    let mut aggregates = Vec::new();
    for run in runs {
        let evals = evaluate_run(run, datasets, mode)?;
        let n = evals.len() as f64;
        aggregates.push(StrategyAggregate {
            strategy: run.strategy,
            mean_auc: evals.iter().map(|e| e.auc).sum::<f64>() / n,
            mean_f1: evals.iter().map(|e| e.f1.f1).sum::<f64>() / n,
            models_trained: run.cost.models_trained,
            total_epochs: run.cost.total_epochs,
            wall_ms: run.cost.total_wall_time.as_millis(),
        });
        rows.extend(evals);
    }
    Ok(EvaluationReport { rows, aggregates })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_perfect_separation() {
        let scores = [0.1, 0.2, 0.8, 0.9];
        let labels = [0, 0, 1, 1];
        assert_eq!(roc_auc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn auc_worked_four_point_case() {
        // Pair counting: positives {0.35, 0.8} vs negatives {0.1, 0.4};
        // 3 of 4 pairs rank the positive higher.
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [0, 0, 1, 1];
        assert_eq!(roc_auc(&scores, &labels).unwrap(), 0.75);
    }

    #[test]
    fn auc_random_scores_near_half() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<u8> = (0..10_000).map(|_| u8::from(rng.gen_bool(0.3))).collect();
        let auc = roc_auc(&scores, &labels).unwrap();
        assert!((auc - 0.5).abs() < 0.05, "auc = {auc}");
    }

    #[test]
    fn auc_handles_ties_by_averaging() {
        let scores = [0.5, 0.5, 0.5, 0.5];
        let labels = [0, 1, 0, 1];
        assert_eq!(roc_auc(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn auc_single_class_is_an_error() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 1]),
            Err(EvalError::SingleClass)
        ));
    }

    #[test]
    fn auc_invariant_under_monotone_transforms() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..500).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<u8> = (0..500).map(|_| u8::from(rng.gen_bool(0.2))).collect();
        let base = roc_auc(&scores, &labels).unwrap();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let affine: Vec<f64> = scores.iter().map(|s| 3.5 * s + 11.0).collect();
        assert!((roc_auc(&exp, &labels).unwrap() - base).abs() < 1e-12);
        assert!((roc_auc(&affine, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn f1_perfect_scores() {
        let scores = [0.0, 0.1, 0.9, 1.0];
        let labels = [0, 0, 1, 1];
        let r = best_f1(&scores, &labels, F1Mode::Pointwise).unwrap();
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 1.0);
    }

    #[test]
    fn f1_all_equal_scores_closed_form() {
        // One threshold: everything predicted positive, recall 1,
        // precision = prevalence p, f1 = 2p / (p + 1).
        let scores = [0.5; 10];
        let mut labels = [0u8; 10];
        labels[0] = 1;
        labels[1] = 1;
        labels[2] = 1;
        let p = 0.3;
        let r = best_f1(&scores, &labels, F1Mode::Pointwise).unwrap();
        assert!((r.f1 - 2.0 * p / (p + 1.0)).abs() < 1e-12);
        assert_eq!(r.recall, 1.0);
    }

    /// Brute-force oracle: try every threshold, recompute the confusion
    /// matrix from scratch.
    fn f1_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut best = 0.0f64;
        for &t in scores {
            let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
            for (&s, &l) in scores.iter().zip(labels) {
                let pred = s >= t;
                match (pred, l == 1) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fn_ += 1.0,
                    _ => {}
                }
            }
            let prec = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
            let rec = tp / (tp + fn_);
            let f1 = if prec + rec == 0.0 {
                0.0
            } else {
                2.0 * prec * rec / (prec + rec)
            };
            best = best.max(f1);
        }
        best
    }

    #[test]
    fn f1_matches_oracle_on_small_inputs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.gen_range(2..=20);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.4))).collect();
            if labels.iter().all(|&l| l == 0) {
                labels[0] = 1;
            }
            if labels.iter().all(|&l| l == 1) {
                labels[0] = 0;
            }
            let got = best_f1(&scores, &labels, F1Mode::Pointwise).unwrap();
            let want = f1_oracle(&scores, &labels);
            assert!(
                (got.f1 - want).abs() < 1e-12,
                "scores={scores:?} labels={labels:?}: {} vs {want}",
                got.f1
            );
        }
    }

    #[test]
    fn point_adjust_credits_whole_segment() {
        // One 4-point anomaly segment; only one point scores high.
        let scores = [0.1, 0.1, 0.9, 0.1, 0.1, 0.1, 0.2];
        let labels = [0, 1, 1, 1, 1, 0, 0];
        let pointwise = best_f1(&scores, &labels, F1Mode::Pointwise).unwrap();
        let adjusted = best_f1(&scores, &labels, F1Mode::PointAdjust).unwrap();
        assert!(adjusted.f1 > pointwise.f1);
        assert_eq!(adjusted.recall, 1.0);
        assert_eq!(adjusted.f1, 1.0);
    }
}
