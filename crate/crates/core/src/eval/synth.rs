//! Synthetic fleet generator.
//!
//! Stands in for a live edge testbed: devices are planted in clusters with
//! heterogeneous per-cluster metric distributions, each device jittered
//! slightly around its cluster, and test splits carry injected anomalies
//! (spikes, level shifts, variance bursts) with exact per-timestep labels.
//! Everything derives from the spec seed per device, so output is
//! byte-identical across runs and independent of generation order.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterMap;
use crate::data::{DeviceDataset, Matrix};
use crate::seed;

use super::EvalError;

/// Distribution of one planted cluster: per-metric means and scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDistribution {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnomalySpec {
    /// Target fraction of anomalous test timesteps, in (0, 0.5).
    pub rate: f64,
    /// Deviation size in units of the metric scale.
    pub magnitude: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for AnomalySpec {
    fn default() -> Self {
        Self {
            rate: 0.08,
            magnitude: 6.0,
            min_len: 4,
            max_len: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticFleetSpec {
    pub n_devices: usize,
    pub n_clusters: usize,
    pub n_metrics: usize,
    pub t_train: usize,
    pub t_test: usize,
    pub seed: u64,
    /// Stddev of per-device mean offsets, in units of the cluster scale.
    pub device_jitter: f64,
    /// Spacing between cluster means, in units of the metric scale. Only
    /// used when `clusters` is not given explicitly.
    pub cluster_separation: f64,
    pub clusters: Option<Vec<ClusterDistribution>>,
    pub anomalies: AnomalySpec,
}

impl Default for SyntheticFleetSpec {
    fn default() -> Self {
        Self {
            n_devices: 9,
            n_clusters: 3,
            n_metrics: 4,
            t_train: 2000,
            t_test: 1200,
            seed: 7,
            device_jitter: 0.3,
            cluster_separation: 6.0,
            clusters: None,
            anomalies: AnomalySpec::default(),
        }
    }
}

impl SyntheticFleetSpec {
    pub fn new(n_devices: usize, n_clusters: usize, n_metrics: usize, seed: u64) -> Self {
        Self {
            n_devices,
            n_clusters,
            n_metrics,
            seed,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, EvalError> {
        let spec: SyntheticFleetSpec =
            toml::from_str(text).map_err(|e| EvalError::BadSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |msg: String| Err(EvalError::BadSpec(msg));
        if self.n_devices == 0 || self.n_clusters == 0 || self.n_metrics == 0 {
            return bad("device, cluster and metric counts must be positive".into());
        }
        if self.n_clusters > self.n_devices {
            return bad(format!(
                "n_clusters {} exceeds n_devices {}",
                self.n_clusters, self.n_devices
            ));
        }
        if self.t_train < 2 || self.t_test < 2 {
            return bad("t_train and t_test must be at least 2".into());
        }
        if !(0.0 < self.anomalies.rate && self.anomalies.rate < 0.5) {
            return bad(format!(
                "anomaly rate {} must be in (0, 0.5)",
                self.anomalies.rate
            ));
        }
        if self.anomalies.min_len == 0
            || self.anomalies.min_len > self.anomalies.max_len
            || self.anomalies.max_len > self.t_test
        {
            return bad("anomaly segment lengths out of range".into());
        }
        if self.device_jitter < 0.0 || self.cluster_separation <= 0.0 {
            return bad("jitter must be >= 0 and separation > 0".into());
        }
        if let Some(clusters) = &self.clusters {
            if clusters.len() != self.n_clusters {
                return bad(format!(
                    "expected {} cluster distributions, got {}",
                    self.n_clusters,
                    clusters.len()
                ));
            }
            for c in clusters {
                if c.means.len() != self.n_metrics || c.scales.len() != self.n_metrics {
                    return bad("cluster distribution length != n_metrics".into());
                }
                if c.scales.iter().any(|&s| s <= 0.0) {
                    return bad("cluster scales must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// Planted cluster of a device index (contiguous blocks).
    pub fn true_cluster_of(&self, device_index: usize) -> usize {
        device_index * self.n_clusters / self.n_devices
    }

    /// The planted partition, for recovery checks.
    pub fn true_partition(&self) -> ClusterMap {
        let mut groups = vec![BTreeSet::new(); self.n_clusters];
        for i in 0..self.n_devices {
            groups[self.true_cluster_of(i)].insert(device_name(i));
        }
        ClusterMap::from_groups(groups)
    }

    /// Cluster distributions: explicit ones if given, otherwise derived from
    /// the separation knob (distinct mean bands and mildly different scales
    /// per cluster).
    fn cluster_distributions(&self) -> Vec<ClusterDistribution> {
        if let Some(explicit) = &self.clusters {
            return explicit.clone();
        }
        (0..self.n_clusters)
            .map(|k| {
                let means = (0..self.n_metrics)
                    .map(|m| {
                        let scale = base_scale(k, m);
                        (k as f64 + 1.0) * self.cluster_separation * scale
                            + m as f64 * 0.5
                    })
                    .collect();
                let scales = (0..self.n_metrics).map(|m| base_scale(k, m)).collect();
                ClusterDistribution { means, scales }
            })
            .collect()
    }
}

fn base_scale(cluster: usize, metric: usize) -> f64 {
    0.2 * (1.0 + 0.4 * cluster as f64 + 0.15 * metric as f64)
}

pub fn device_name(index: usize) -> String {
    format!("device-{index:02}")
}

#[derive(Debug, Clone, Copy)]
enum AnomalyKind {
    Spike,
    LevelShift,
    VarianceBurst,
}

const ANOMALY_CYCLE: [AnomalyKind; 3] = [
    AnomalyKind::Spike,
    AnomalyKind::LevelShift,
    AnomalyKind::VarianceBurst,
];

/// Generate the fleet in memory. Use [`crate::data::write_dataset`] to lay
/// it out on disk in the ingestion format.
pub fn generate_fleet(spec: &SyntheticFleetSpec) -> Result<Vec<DeviceDataset>, EvalError> {
    spec.validate()?;
    let clusters = spec.cluster_distributions();

    (0..spec.n_devices)
        .map(|i| generate_device(spec, &clusters[spec.true_cluster_of(i)], i))
        .collect()
}

fn generate_device(
    spec: &SyntheticFleetSpec,
    cluster: &ClusterDistribution,
    index: usize,
) -> Result<DeviceDataset, EvalError> {
    let device_id = device_name(index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_from_parts(
        spec.seed,
        "fleet-device",
        &[device_id.as_str()],
    ));
    let k = spec.true_cluster_of(index);
    let normal = Normal::new(0.0, 1.0).map_err(|e| EvalError::BadSpec(e.to_string()))?;

    // Device-level offsets around the cluster means.
    let offsets: Vec<f64> = cluster
        .scales
        .iter()
        .map(|s| normal.sample(&mut rng) * spec.device_jitter * s)
        .collect();
    // Cluster-specific slow oscillation gives windows temporal structure.
    let period = 20.0 + 15.0 * k as f64;

    let series = |t_len: usize, rng: &mut ChaCha8Rng| -> Matrix {
        let mut m = Matrix::zeros(spec.n_metrics, t_len);
        for metric in 0..spec.n_metrics {
            let mean = cluster.means[metric] + offsets[metric];
            let scale = cluster.scales[metric];
            let phase = metric as f64 / spec.n_metrics as f64 * std::f64::consts::TAU;
            let row = m.row_mut(metric);
            for (t, v) in row.iter_mut().enumerate() {
                let wave = (t as f64 / period * std::f64::consts::TAU + phase).sin();
                *v = mean + scale * wave + scale * normal.sample(rng);
            }
        }
        m
    };

    let train = series(spec.t_train, &mut rng);
    let mut test = series(spec.t_test, &mut rng);
    let labels = inject_anomalies(spec, cluster, &mut test, &mut rng);

    Ok(DeviceDataset {
        device_id,
        metric_names: (0..spec.n_metrics).map(|m| format!("m{m:02}")).collect(),
        train,
        test: Some(test),
        test_labels: Some(labels),
        gaps_filled: 0,
    })
}

/// Carve non-overlapping anomaly segments into the test matrix until the
/// labeled fraction reaches the target rate, cycling through the three
/// anomaly families.
fn inject_anomalies(
    spec: &SyntheticFleetSpec,
    cluster: &ClusterDistribution,
    test: &mut Matrix,
    rng: &mut ChaCha8Rng,
) -> Vec<u8> {
    let t_len = test.n_cols();
    let mut labels = vec![0u8; t_len];
    let target = (spec.anomalies.rate * t_len as f64).round() as usize;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut labeled = 0usize;
    let mut kind_idx = 0usize;
    let mut attempts = 0usize;
    while labeled < target && attempts < 200 {
        attempts += 1;
        let kind = ANOMALY_CYCLE[kind_idx % ANOMALY_CYCLE.len()];
        let len = match kind {
            AnomalyKind::Spike => rng.gen_range(1..=3usize.min(spec.anomalies.max_len)),
            _ => rng.gen_range(spec.anomalies.min_len..=spec.anomalies.max_len),
        };
        let len = len.min(target - labeled + 2).max(1).min(t_len);
        let start = rng.gen_range(0..=t_len - len);
        if labels[start..start + len].iter().any(|&l| l == 1) {
            continue; // overlap, retry with a fresh position
        }
        kind_idx += 1;

        // Affected metric subset: at least one, chosen per segment.
        let affected: Vec<usize> = {
            let mut picked: Vec<usize> = (0..spec.n_metrics)
                .filter(|_| rng.gen_bool(0.6))
                .collect();
            if picked.is_empty() {
                picked.push(rng.gen_range(0..spec.n_metrics));
            }
            picked
        };
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let mag = spec.anomalies.magnitude;

        for &metric in &affected {
            let scale = cluster.scales[metric];
            let row = test.row_mut(metric);
            match kind {
                AnomalyKind::Spike => {
                    for v in &mut row[start..start + len] {
                        *v += sign * mag * scale;
                    }
                }
                AnomalyKind::LevelShift => {
                    for v in &mut row[start..start + len] {
                        *v += sign * 0.5 * mag * scale;
                    }
                }
                AnomalyKind::VarianceBurst => {
                    for v in &mut row[start..start + len] {
                        *v += normal.sample(rng) * 0.5 * mag * scale;
                    }
                }
            }
        }
        for l in &mut labels[start..start + len] {
            *l = 1;
        }
        labeled += len;
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::cluster_devices;
    use crate::data::{select_metrics, scale_by_range, write_dataset};
    use crate::similarity::{build_similarity_graph, estimate_distributions};
    use tempfile::TempDir;

    #[test]
    fn generation_is_deterministic_and_byte_stable() {
        let spec = SyntheticFleetSpec::new(3, 2, 3, 42);
        let a = generate_fleet(&spec).unwrap();
        let b = generate_fleet(&spec).unwrap();
        assert_eq!(a, b);

        let dir_a = TempDir::new().unwrap();
        let dir_b = TempDir::new().unwrap();
        write_dataset(&a, dir_a.path()).unwrap();
        write_dataset(&b, dir_b.path()).unwrap();
        for sub in ["train", "test", "test_label"] {
            for entry in std::fs::read_dir(dir_a.path().join(sub)).unwrap() {
                let path = entry.unwrap().path();
                let name = path.file_name().unwrap();
                let other = dir_b.path().join(sub).join(name);
                assert_eq!(
                    std::fs::read(&path).unwrap(),
                    std::fs::read(&other).unwrap(),
                    "{path:?} differs"
                );
            }
        }
    }

    #[test]
    fn labels_mark_injected_positions() {
        let spec = SyntheticFleetSpec::new(2, 1, 2, 9);
        let clean_spec = SyntheticFleetSpec {
            anomalies: AnomalySpec {
                rate: 0.0001, // effectively no injections after rounding
                ..spec.anomalies.clone()
            },
            ..spec.clone()
        };
        let noisy = generate_fleet(&spec).unwrap();
        let clean = generate_fleet(&clean_spec).unwrap();
        for (n, c) in noisy.iter().zip(&clean) {
            let labels = n.test_labels.as_ref().unwrap();
            let frac = labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len() as f64;
            assert!(frac > 0.04 && frac < 0.16, "label fraction {frac}");
            // Unlabeled timesteps are untouched relative to the clean twin.
            let nt = n.test.as_ref().unwrap();
            let ct = c.test.as_ref().unwrap();
            for t in 0..labels.len() {
                for m in 0..2 {
                    if labels[t] == 0 {
                        assert_eq!(nt.get(m, t), ct.get(m, t), "metric {m} t {t}");
                    }
                }
            }
        }
    }

    #[test]
    fn well_separated_clusters_are_recovered() {
        for seed in 0..20 {
            let spec = SyntheticFleetSpec {
                t_train: 600,
                t_test: 100,
                ..SyntheticFleetSpec::new(6, 2, 3, 1000 + seed)
            };
            let fleet = generate_fleet(&spec).unwrap();
            let subset = select_metrics(&fleet, 3, 0.5, 0.999).unwrap();
            let scaled = scale_by_range(&fleet, &subset, false).unwrap();
            let dists = estimate_distributions(&scaled, 50).unwrap();
            let graph = build_similarity_graph(&dists).unwrap();
            let found = cluster_devices(&graph, 2).unwrap();
            assert_eq!(found, spec.true_partition(), "seed {seed}");
        }
    }

    #[test]
    fn spec_validation_catches_nonsense() {
        let mut spec = SyntheticFleetSpec::new(3, 5, 2, 1);
        assert!(matches!(generate_fleet(&spec), Err(EvalError::BadSpec(_))));
        spec = SyntheticFleetSpec::new(4, 2, 2, 1);
        spec.anomalies.rate = 0.7;
        assert!(spec.validate().is_err());
        spec.anomalies.rate = 0.1;
        spec.anomalies.min_len = 50;
        spec.anomalies.max_len = 20;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_toml_roundtrip() {
        let spec = SyntheticFleetSpec::new(5, 2, 3, 77);
        let text = spec.to_toml();
        assert_eq!(SyntheticFleetSpec::from_toml(&text).unwrap(), spec);
    }
}
