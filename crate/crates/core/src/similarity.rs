//! Per-device metric distributions and the complete similarity graph.
//!
//! Each kept metric is histogrammed with bin edges shared across all
//! devices, so per-metric distributions are directly comparable. The
//! distance between two devices is the L2-norm over metrics of the
//! Jensen-Shannon distance between their per-metric distributions; the
//! complete graph over all device pairs feeds the clustering stage.
//!
//! Conventions: natural logarithm throughout (so JS divergence is bounded by
//! ln 2), `0 * ln 0 = 0`, and no smoothing — the standalone KL divergence
//! reports `+inf` when absolute continuity fails, while JS never needs it
//! because the mixture dominates both inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::data::ScaledFleet;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("distribution lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("distribution does not sum to 1 (sum = {0})")]
    NotNormalized(f64),
    #[error("bin count must be at least 2, got {0}")]
    TooFewBins(usize),
    #[error("devices have mismatched bin edges for metric {0}")]
    BinMismatch(usize),
    #[error("device count {0} too small to build a graph")]
    TooFewDevices(usize),
    #[error("metric counts differ between devices: {0} vs {1}")]
    MetricMismatch(usize, usize),
    #[error("unknown device `{0}`")]
    UnknownDevice(String),
    #[error("malformed graph file: {0}")]
    Malformed(String),
}

/// Normalized histogram of one metric on one device. Bin edges are shared
/// per metric across all devices.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricDistribution {
    pub bin_edges: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// All per-metric distributions of one device.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceDistributions {
    pub device_id: String,
    pub metrics: Vec<MetricDistribution>,
}

const NORMALIZATION_TOL: f64 = 1e-9;

/// Histogram every device and kept metric with `bins` equal-width bins over
/// the metric's global (cross-device) value range.
///
/// Degenerate metrics (constant after scaling) get a single point mass in
/// the middle bin for every device, making them distance-neutral.
pub fn estimate_distributions(
    scaled: &ScaledFleet,
    bins: usize,
) -> Result<Vec<DeviceDistributions>, SimilarityError> {
    if bins < 2 {
        return Err(SimilarityError::TooFewBins(bins));
    }
    let h = scaled.metric_indices.len();

    // Shared support per metric.
    let mut edges_per_metric = Vec::with_capacity(h);
    for row in 0..h {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for device in &scaled.data {
            for &v in device.row(row) {
                min = min.min(v);
                max = max.max(v);
            }
        }
        if scaled.degenerate[row] || max <= min {
            // Point support: spread unit-width bins around the value.
            min = min - 0.5;
            max = min + 1.0;
        }
        let width = (max - min) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|j| min + j as f64 * width).collect();
        edges_per_metric.push(edges);
    }

    Ok(scaled
        .device_ids
        .iter()
        .zip(&scaled.data)
        .map(|(device_id, matrix)| {
            let metrics = (0..h)
                .map(|row| {
                    let edges = &edges_per_metric[row];
                    let lo = edges[0];
                    let hi = edges[bins];
                    let width = (hi - lo) / bins as f64;
                    let mut counts = vec![0u64; bins];
                    for &v in matrix.row(row) {
                        let mut bin = ((v - lo) / width) as usize;
                        if bin >= bins {
                            bin = bins - 1; // values at the global max
                        }
                        counts[bin] += 1;
                    }
                    let total = matrix.n_cols() as f64;
                    MetricDistribution {
                        bin_edges: edges.clone(),
                        probabilities: counts.iter().map(|&c| c as f64 / total).collect(),
                    }
                })
                .collect();
            DeviceDistributions {
                device_id: device_id.clone(),
                metrics,
            }
        })
        .collect())
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<(), SimilarityError> {
    if p.len() != q.len() {
        return Err(SimilarityError::LengthMismatch(p.len(), q.len()));
    }
    for dist in [p, q] {
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL || dist.iter().any(|&v| v < 0.0) {
            return Err(SimilarityError::NotNormalized(sum));
        }
    }
    Ok(())
}

/// Kullback-Leibler divergence `sum p_i ln(p_i / q_i)` in nats.
///
/// Terms with `p_i = 0` contribute nothing; `q_i = 0` with `p_i > 0` yields
/// `+inf`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, SimilarityError> {
    check_pair(p, q)?;
    let mut sum = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        sum += pi * (pi / qi).ln();
    }
    Ok(sum)
}

/// Jensen-Shannon divergence: the mean of both KL divergences against the
/// midpoint mixture. Always finite, symmetric, bounded by ln 2.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64, SimilarityError> {
    check_pair(p, q)?;
    let mut sum = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let mi = 0.5 * (pi + qi);
        if pi > 0.0 {
            sum += 0.5 * pi * (pi / mi).ln();
        }
        if qi > 0.0 {
            sum += 0.5 * qi * (qi / mi).ln();
        }
    }
    // Rounding can push an identical pair a hair below zero.
    Ok(sum.max(0.0))
}

/// Jensen-Shannon distance: square root of the divergence. A true metric,
/// bounded by sqrt(ln 2).
pub fn js_distance(p: &[f64], q: &[f64]) -> Result<f64, SimilarityError> {
    Ok(js_divergence(p, q)?.sqrt())
}

/// Device-to-device distance: L2-norm of the per-metric JS distances.
pub fn sim_dist(
    a: &DeviceDistributions,
    b: &DeviceDistributions,
) -> Result<f64, SimilarityError> {
    if a.metrics.len() != b.metrics.len() {
        return Err(SimilarityError::MetricMismatch(
            a.metrics.len(),
            b.metrics.len(),
        ));
    }
    let mut sum_sq = 0.0;
    for (idx, (ma, mb)) in a.metrics.iter().zip(&b.metrics).enumerate() {
        if ma.bin_edges != mb.bin_edges {
            return Err(SimilarityError::BinMismatch(idx));
        }
        let d = js_distance(&ma.probabilities, &mb.probabilities)?;
        sum_sq += d * d;
    }
    Ok(sum_sq.sqrt())
}

/// Complete weighted graph over devices. Vertices are kept sorted and each
/// unordered pair is stored once.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    vertices: Vec<String>,
    /// Upper triangle, row-major: weight of (i, j) for i < j.
    weights: Vec<f64>,
}

impl SimilarityGraph {
    pub fn new(mut vertices: Vec<String>) -> Self {
        vertices.sort();
        let n = vertices.len();
        let n_edges = if n < 2 { 0 } else { n * (n - 1) / 2 };
        Self {
            vertices,
            weights: vec![0.0; n_edges],
        }
    }

    pub fn vertices(&self) -> &[String] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn n_edges(&self) -> usize {
        self.weights.len()
    }

    fn index_of(&self, id: &str) -> Result<usize, SimilarityError> {
        self.vertices
            .binary_search_by(|v| v.as_str().cmp(id))
            .map_err(|_| SimilarityError::UnknownDevice(id.to_string()))
    }

    fn pair_slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j);
        // Offset of row i in the packed upper triangle.
        i * self.vertices.len() - i * (i + 1) / 2 + (j - i - 1)
    }

    pub fn weight(&self, a: &str, b: &str) -> Result<f64, SimilarityError> {
        let i = self.index_of(a)?;
        let j = self.index_of(b)?;
        if i == j {
            return Err(SimilarityError::Malformed("self edge".into()));
        }
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        Ok(self.weights[self.pair_slot(i, j)])
    }

    pub fn set_weight(&mut self, a: &str, b: &str, w: f64) -> Result<(), SimilarityError> {
        let i = self.index_of(a)?;
        let j = self.index_of(b)?;
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        let slot = self.pair_slot(i, j);
        self.weights[slot] = w;
        Ok(())
    }

    /// All edges as `(a, b, weight)` with `a < b`, in lexicographic order.
    pub fn edges(&self) -> Vec<(&str, &str, f64)> {
        let n = self.vertices.len();
        let mut out = Vec::with_capacity(self.weights.len());
        for i in 0..n {
            for j in i + 1..n {
                out.push((
                    self.vertices[i].as_str(),
                    self.vertices[j].as_str(),
                    self.weights[self.pair_slot(i, j)],
                ));
            }
        }
        out
    }

    /// Edges incident to `id`, as `(other, weight)`.
    pub fn incident(&self, id: &str) -> Result<Vec<(&str, f64)>, SimilarityError> {
        let i = self.index_of(id)?;
        Ok((0..self.vertices.len())
            .filter(|&j| j != i)
            .map(|j| {
                let (lo, hi) = if i < j { (i, j) } else { (j, i) };
                (
                    self.vertices[j].as_str(),
                    self.weights[self.pair_slot(lo, hi)],
                )
            })
            .collect())
    }

    /// Add a vertex with a weight to every existing vertex.
    pub fn add_vertex(
        &mut self,
        id: &str,
        edge_weights: &BTreeMap<String, f64>,
    ) -> Result<(), SimilarityError> {
        if self.index_of(id).is_ok() {
            return Err(SimilarityError::Malformed(format!(
                "vertex {id} already present"
            )));
        }
        for v in &self.vertices {
            if !edge_weights.contains_key(v) {
                return Err(SimilarityError::Malformed(format!(
                    "missing edge weight from {id} to {v}"
                )));
            }
        }
        let mut rebuilt = SimilarityGraph::new(
            self.vertices
                .iter()
                .cloned()
                .chain(std::iter::once(id.to_string()))
                .collect(),
        );
        for (a, b, w) in self.edges() {
            rebuilt.set_weight(a, b, w)?;
        }
        for (other, &w) in edge_weights {
            rebuilt.set_weight(id, other, w)?;
        }
        *self = rebuilt;
        Ok(())
    }

    pub fn remove_vertex(&mut self, id: &str) -> Result<(), SimilarityError> {
        self.index_of(id)?;
        let mut rebuilt = SimilarityGraph::new(
            self.vertices.iter().filter(|v| *v != id).cloned().collect(),
        );
        for (a, b, w) in self.edges() {
            if a != id && b != id {
                rebuilt.set_weight(a, b, w)?;
            }
        }
        *self = rebuilt;
        Ok(())
    }

    /// Replace every edge incident to `id` (used when a device drifts).
    pub fn update_vertex(
        &mut self,
        id: &str,
        edge_weights: &BTreeMap<String, f64>,
    ) -> Result<(), SimilarityError> {
        self.index_of(id)?;
        for v in self.vertices.clone() {
            if v == id {
                continue;
            }
            let w = edge_weights.get(&v).ok_or_else(|| {
                SimilarityError::Malformed(format!("missing edge weight from {id} to {v}"))
            })?;
            self.set_weight(id, &v, *w)?;
        }
        Ok(())
    }

    /// Plain-text edge list, `device_i,device_j,weight`, 17 significant
    /// digits, lexicographic order. Byte-stable for a given graph.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for (a, b, w) in self.edges() {
            let _ = writeln!(out, "{a},{b},{w:.16e}");
        }
        out
    }

    pub fn from_edge_list(text: &str) -> Result<Self, SimilarityError> {
        let mut weights: BTreeMap<(String, String), f64> = BTreeMap::new();
        let mut vertices = std::collections::BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(SimilarityError::Malformed(format!(
                    "line {}: expected device,device,weight",
                    lineno + 1
                )));
            }
            let w: f64 = parts[2].parse().map_err(|_| {
                SimilarityError::Malformed(format!("line {}: bad weight", lineno + 1))
            })?;
            vertices.insert(parts[0].to_string());
            vertices.insert(parts[1].to_string());
            weights.insert((parts[0].to_string(), parts[1].to_string()), w);
        }
        let mut graph = SimilarityGraph::new(vertices.into_iter().collect());
        let expected = graph.n_edges();
        if weights.len() != expected {
            return Err(SimilarityError::Malformed(format!(
                "expected {expected} edges for {} vertices, found {}",
                graph.len(),
                weights.len()
            )));
        }
        for ((a, b), w) in weights {
            graph.set_weight(&a, &b, w)?;
        }
        Ok(graph)
    }
}

/// Build the complete similarity graph from per-device distributions.
///
/// Edges are independent of one another, so with the `parallel` feature they
/// are computed on rayon; results are written back in index order either
/// way, which keeps the output bit-identical across schedules.
pub fn build_similarity_graph(
    distributions: &[DeviceDistributions],
) -> Result<SimilarityGraph, SimilarityError> {
    let pairs = edge_pairs(distributions)?;
    #[cfg(feature = "parallel")]
    let computed: Vec<Result<f64, SimilarityError>> = pairs
        .par_iter()
        .map(|&(i, j)| sim_dist(&distributions[i], &distributions[j]))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let computed: Vec<Result<f64, SimilarityError>> = pairs
        .iter()
        .map(|&(i, j)| sim_dist(&distributions[i], &distributions[j]))
        .collect();
    assemble_graph(distributions, &pairs, computed)
}

/// Sequential twin of [`build_similarity_graph`]; always compiled, used by
/// the benchmark suite and the schedule-independence tests.
pub fn build_similarity_graph_seq(
    distributions: &[DeviceDistributions],
) -> Result<SimilarityGraph, SimilarityError> {
    let pairs = edge_pairs(distributions)?;
    let computed: Vec<Result<f64, SimilarityError>> = pairs
        .iter()
        .map(|&(i, j)| sim_dist(&distributions[i], &distributions[j]))
        .collect();
    assemble_graph(distributions, &pairs, computed)
}

fn edge_pairs(
    distributions: &[DeviceDistributions],
) -> Result<Vec<(usize, usize)>, SimilarityError> {
    let n = distributions.len();
    if n < 2 {
        return Err(SimilarityError::TooFewDevices(n));
    }
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((i, j));
        }
    }
    Ok(pairs)
}

fn assemble_graph(
    distributions: &[DeviceDistributions],
    pairs: &[(usize, usize)],
    computed: Vec<Result<f64, SimilarityError>>,
) -> Result<SimilarityGraph, SimilarityError> {
    let mut graph = SimilarityGraph::new(
        distributions
            .iter()
            .map(|d| d.device_id.clone())
            .collect(),
    );
    for (&(i, j), result) in pairs.iter().zip(computed) {
        graph.set_weight(
            &distributions[i].device_id,
            &distributions[j].device_id,
            result?,
        )?;
    }
    Ok(graph)
}

/// Distributions for a single new or drifted device, binned against an
/// existing fleet's shared edges.
pub fn distributions_against(
    reference: &DeviceDistributions,
    device_id: &str,
    rows: &[Vec<f64>],
) -> Result<DeviceDistributions, SimilarityError> {
    if rows.len() != reference.metrics.len() {
        return Err(SimilarityError::MetricMismatch(
            rows.len(),
            reference.metrics.len(),
        ));
    }
    let metrics = reference
        .metrics
        .iter()
        .zip(rows)
        .map(|(proto, values)| {
            let edges = &proto.bin_edges;
            let bins = edges.len() - 1;
            let lo = edges[0];
            let hi = edges[bins];
            let width = (hi - lo) / bins as f64;
            let mut counts = vec![0u64; bins];
            for &v in values {
                let pos = (v - lo) / width;
                let bin = if pos < 0.0 {
                    0
                } else {
                    (pos as usize).min(bins - 1)
                };
                counts[bin] += 1;
            }
            let total = values.len() as f64;
            MetricDistribution {
                bin_edges: edges.clone(),
                probabilities: counts.iter().map(|&c| c as f64 / total).collect(),
            }
        })
        .collect();
    Ok(DeviceDistributions {
        device_id: device_id.to_string(),
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Matrix, ScaledFleet};

    const LN2: f64 = std::f64::consts::LN_2;

    fn fleet(devices: Vec<(&str, Vec<Vec<f64>>)>) -> ScaledFleet {
        let h = devices[0].1.len();
        ScaledFleet {
            device_ids: devices.iter().map(|(id, _)| id.to_string()).collect(),
            metric_indices: (0..h).collect(),
            degenerate: vec![false; h],
            data: devices
                .into_iter()
                .map(|(_, rows)| {
                    let t = rows[0].len();
                    Matrix::new(h, t, rows.into_iter().flatten().collect())
                })
                .collect(),
        }
    }

    #[test]
    fn point_mass_for_identical_values() {
        let f = fleet(vec![("a", vec![vec![0.25; 10]]), ("b", vec![vec![0.25; 10]])]);
        let dists = estimate_distributions(&f, 4).unwrap();
        for d in &dists {
            let p = &d.metrics[0].probabilities;
            assert_eq!(p.iter().filter(|&&v| v > 0.0).count(), 1);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(dists[0].metrics[0], dists[1].metrics[0]);
    }

    #[test]
    fn uniform_samples_fill_bins_evenly() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let values: Vec<f64> = (0..10_000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let f = fleet(vec![("a", vec![values.clone()]), ("b", vec![values])]);
        let dists = estimate_distributions(&f, 4).unwrap();
        for p in &dists[0].metrics[0].probabilities {
            assert!((p - 0.25).abs() < 0.02, "bin probability {p}");
        }
    }

    #[test]
    fn disjoint_ranges_share_no_bins() {
        let low: Vec<f64> = (0..100).map(|i| 0.4 * i as f64 / 99.0).collect();
        let high: Vec<f64> = (0..100).map(|i| 0.6 + 0.4 * i as f64 / 99.0).collect();
        let f = fleet(vec![("a", vec![low]), ("b", vec![high])]);
        let dists = estimate_distributions(&f, 10).unwrap();
        let pa = &dists[0].metrics[0].probabilities;
        let pb = &dists[1].metrics[0].probabilities;
        assert!(pa.iter().zip(pb).all(|(x, y)| x * y == 0.0));
    }

    #[test]
    fn kl_basics() {
        let p = [1.0, 0.0];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let q = [0.5, 0.5];
        assert!((kl_divergence(&p, &q).unwrap() - LN2).abs() < 1e-15);
        assert_eq!(kl_divergence(&p, &[0.0, 1.0]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn kl_input_validation() {
        assert!(matches!(
            kl_divergence(&[1.0], &[0.5, 0.5]),
            Err(SimilarityError::LengthMismatch(1, 2))
        ));
        assert!(matches!(
            kl_divergence(&[0.9, 0.0], &[0.5, 0.5]),
            Err(SimilarityError::NotNormalized(_))
        ));
    }

    #[test]
    fn js_of_identical_is_zero() {
        let p = [0.3, 0.5, 0.2];
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        assert_eq!(js_distance(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn js_of_disjoint_is_ln2() {
        let p = [1.0, 0.0];
        let q = [0.0, 1.0];
        assert!((js_divergence(&p, &q).unwrap() - LN2).abs() < 1e-12);
        assert!((js_distance(&p, &q).unwrap() - LN2.sqrt()).abs() < 1e-12);
    }

    /// Independent route: expand the definition term by term against the
    /// explicit mixture, without reusing the implementation's loop.
    fn js_brute_force(p: &[f64], q: &[f64]) -> f64 {
        let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect();
        let kl = |x: &[f64], y: &[f64]| -> f64 {
            x.iter()
                .zip(y)
                .map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 })
                .sum()
        };
        0.5 * kl(p, &m) + 0.5 * kl(q, &m)
    }

    #[test]
    fn js_matches_brute_force() {
        let p = [0.5, 0.5];
        let q = [0.9, 0.1];
        let got = js_divergence(&p, &q).unwrap();
        assert!((got - js_brute_force(&p, &q)).abs() < 1e-12);
    }

    #[test]
    fn sim_dist_reduces_and_composes() {
        let dist = |probs: Vec<f64>| MetricDistribution {
            bin_edges: (0..=probs.len()).map(|i| i as f64).collect(),
            probabilities: probs,
        };
        let a1 = dist(vec![0.7, 0.3]);
        let b1 = dist(vec![0.2, 0.8]);
        let a2 = dist(vec![0.5, 0.5]);
        let b2 = dist(vec![0.9, 0.1]);

        let single = sim_dist(
            &DeviceDistributions {
                device_id: "a".into(),
                metrics: vec![a1.clone()],
            },
            &DeviceDistributions {
                device_id: "b".into(),
                metrics: vec![b1.clone()],
            },
        )
        .unwrap();
        let d1 = js_distance(&a1.probabilities, &b1.probabilities).unwrap();
        assert_eq!(single, d1);

        let both = sim_dist(
            &DeviceDistributions {
                device_id: "a".into(),
                metrics: vec![a1, a2.clone()],
            },
            &DeviceDistributions {
                device_id: "b".into(),
                metrics: vec![b1, b2.clone()],
            },
        )
        .unwrap();
        let d2 = js_distance(&a2.probabilities, &b2.probabilities).unwrap();
        assert!((both - (d1 * d1 + d2 * d2).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sim_dist_zero_for_identical_devices() {
        let f = fleet(vec![
            ("a", vec![vec![0.1, 0.9, 0.4], vec![0.0, 0.5, 1.0]]),
            ("b", vec![vec![0.1, 0.9, 0.4], vec![0.0, 0.5, 1.0]]),
        ]);
        let dists = estimate_distributions(&f, 8).unwrap();
        assert!(sim_dist(&dists[0], &dists[1]).unwrap() < 1e-12);
    }

    #[test]
    fn graph_shape_and_ordering() {
        // A and B share a distribution; C sits far away.
        let near: Vec<f64> = (0..200).map(|i| 0.1 + 0.2 * ((i % 10) as f64 / 10.0)).collect();
        let far: Vec<f64> = (0..200).map(|i| 0.7 + 0.2 * ((i % 10) as f64 / 10.0)).collect();
        let f = fleet(vec![
            ("a", vec![near.clone()]),
            ("b", vec![near]),
            ("c", vec![far]),
        ]);
        let dists = estimate_distributions(&f, 20).unwrap();
        let graph = build_similarity_graph(&dists).unwrap();
        assert_eq!(graph.n_edges(), 3);
        let ab = graph.weight("a", "b").unwrap();
        let ac = graph.weight("a", "c").unwrap();
        let bc = graph.weight("b", "c").unwrap();
        assert!(ab < ac && ab < bc);
    }

    #[test]
    fn two_devices_make_one_edge() {
        let f = fleet(vec![("a", vec![vec![0.1, 0.2]]), ("b", vec![vec![0.8, 0.9]])]);
        let dists = estimate_distributions(&f, 4).unwrap();
        let graph = build_similarity_graph(&dists).unwrap();
        assert_eq!(graph.n_edges(), 1);
    }

    #[test]
    fn symmetry_is_bit_exact() {
        let f = fleet(vec![
            ("a", vec![vec![0.1, 0.3, 0.6, 0.9]]),
            ("b", vec![vec![0.2, 0.5, 0.7, 1.0]]),
        ]);
        let dists = estimate_distributions(&f, 4).unwrap();
        let fwd = sim_dist(&dists[0], &dists[1]).unwrap();
        let bwd = sim_dist(&dists[1], &dists[0]).unwrap();
        assert_eq!(fwd.to_bits(), bwd.to_bits());
    }

    #[test]
    fn edge_list_roundtrip_and_stability() {
        let f = fleet(vec![
            ("dev-b", vec![vec![0.1, 0.4, 0.9]]),
            ("dev-a", vec![vec![0.3, 0.6, 0.8]]),
            ("dev-c", vec![vec![0.0, 0.5, 1.0]]),
        ]);
        let dists = estimate_distributions(&f, 5).unwrap();
        let graph = build_similarity_graph(&dists).unwrap();
        let text = graph.to_edge_list();
        assert_eq!(text, graph.to_edge_list());
        let parsed = SimilarityGraph::from_edge_list(&text).unwrap();
        assert_eq!(parsed, graph);
        // Lexicographic vertex order regardless of input order.
        assert_eq!(graph.vertices(), &["dev-a", "dev-b", "dev-c"]);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential_bitwise() {
        let rows = |offset: f64| {
            vec![
                (0..300).map(|i| offset + (i as f64 * 0.37) % 1.0).collect::<Vec<f64>>(),
                (0..300).map(|i| offset / 2.0 + (i as f64 * 0.11) % 0.8).collect(),
            ]
        };
        let f = fleet(vec![
            ("a", rows(0.0)),
            ("b", rows(0.3)),
            ("c", rows(0.6)),
            ("d", rows(0.9)),
        ]);
        let dists = estimate_distributions(&f, 32).unwrap();
        let par = build_similarity_graph(&dists).unwrap();
        let seq = build_similarity_graph_seq(&dists).unwrap();
        assert_eq!(par, seq);
    }

    #[test]
    fn vertex_add_remove_update() {
        let mut graph = SimilarityGraph::new(vec!["a".into(), "b".into()]);
        graph.set_weight("a", "b", 0.5).unwrap();
        let mut edges = BTreeMap::new();
        edges.insert("a".to_string(), 0.1);
        edges.insert("b".to_string(), 0.9);
        graph.add_vertex("c", &edges).unwrap();
        assert_eq!(graph.n_edges(), 3);
        assert_eq!(graph.weight("a", "c").unwrap(), 0.1);

        let mut updates = BTreeMap::new();
        updates.insert("a".to_string(), 0.7);
        updates.insert("b".to_string(), 0.2);
        graph.update_vertex("c", &updates).unwrap();
        assert_eq!(graph.weight("c", "a").unwrap(), 0.7);

        graph.remove_vertex("a").unwrap();
        assert_eq!(graph.vertices(), &["b", "c"]);
        assert_eq!(graph.weight("b", "c").unwrap(), 0.2);
    }
}
