//! Fleet-scale training of anomaly-detection models for edge devices.
//!
//! Edge fleets run one unsupervised anomaly detector per device, trained on
//! that device's normal performance metrics. Training every model from
//! scratch is accurate but expensive; training one shared model is cheap but
//! inaccurate. This crate implements the middle ground: devices are grouped
//! by the similarity of their metric distributions, and models are then
//! trained per cluster, either as one shared cluster model or as per-device
//! models warm-started from their nearest already-trained neighbour along the
//! cluster's minimum spanning tree.
//!
//! The pipeline, stage by stage:
//!
//! 1. [`data`] — ingest per-device metric matrices, pick the representative
//!    metric subset, scale by global range, and frame sliding windows.
//! 2. [`similarity`] — estimate per-metric histograms and build the complete
//!    similarity graph from Jensen-Shannon distances.
//! 3. [`clustering`] — Kruskal-style merging down to `K` clusters and the
//!    per-cluster MST transfer schedule.
//! 4. [`model`] — a windowed autoencoder trained with Adam on MSE
//!    reconstruction loss, with parameter-transfer initialization and
//!    reconstruction-error scoring.
//! 5. [`strategies`] — the four fleet training strategies (`gm`, `mpd`,
//!    `cm`, `icptl`) with epoch/wall-time cost accounting, plus handlers for
//!    devices joining, leaving, or drifting.
//! 6. [`eval`] — F1/AUC evaluation, strategy comparison reports, and the
//!    synthetic fleet generator used by the test suites.
//!
//! With the default `parallel` feature the embarrassingly parallel parts
//! (pairwise graph edges, independent model trainings, per-device
//! evaluation) run on rayon; disabling the feature falls back to sequential
//! loops with bit-identical results.

pub mod clustering;
pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod seed;
pub mod similarity;
pub mod strategies;

pub use config::PipelineConfig;
pub use data::{DeviceDataset, Matrix, MetricSubset, WindowSet};
pub use similarity::SimilarityGraph;
