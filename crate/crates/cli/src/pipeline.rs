//! Stage implementations behind the CLI subcommands.
//!
//! Stages share a run directory keyed by the resolved configuration and the
//! dataset fingerprint, so reruns with the same inputs land in the same
//! place and completed stages are skipped unless `--force` is given.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use fleetad_core::clustering::{cluster_devices, plan_training, ClusterMap, TrainingPlan};
use fleetad_core::config::PipelineConfig;
use fleetad_core::data::{
    ingest_dataset, scale_by_range, select_metrics, DeviceDataset, Layout, MetricSubset,
    MissingPolicy,
};
use fleetad_core::eval::synth::{generate_fleet, SyntheticFleetSpec};
use fleetad_core::eval::{compare_strategies, F1Mode};
use fleetad_core::model::{load_model, save_model};
use fleetad_core::similarity::{build_similarity_graph, estimate_distributions, SimilarityGraph};
use fleetad_core::strategies::{
    handle_fleet_event, run_cm, run_gm, run_icptl, run_mpd, FleetEvent, FleetState, RetrainAction,
    Strategy, StrategyRun, TrainSettings, TrainingCost,
};

use crate::manifest::{fingerprint_dataset, sha256_hex, RunManifest};
use crate::CliError;

pub struct Context {
    pub config: PipelineConfig,
    pub run_dir: PathBuf,
    pub run_id: String,
    pub force: bool,
    manifest: RunManifest,
}

impl Context {
    /// Resolve config + overrides, derive the run id from the resolved
    /// config and the dataset fingerprint, and open (or create) the run
    /// directory.
    pub fn open(
        config_path: Option<&Path>,
        out_dir: &Path,
        seed_override: Option<u64>,
        k_override: Option<usize>,
        force: bool,
    ) -> Result<Self, CliError> {
        let mut config = match config_path {
            Some(path) => PipelineConfig::load(path).map_err(CliError::config)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = seed_override {
            config.strategy.seed = seed;
        }
        if let Some(k) = k_override {
            config.clustering.k = k;
        }
        config.validate().map_err(CliError::config)?;

        let dataset_root = PathBuf::from(&config.data.root);
        if !dataset_root.is_dir() {
            return Err(CliError::runtime(format!(
                "dataset root {} does not exist (run `genfleet` or point data.root at a dataset)",
                dataset_root.display()
            )));
        }
        let fingerprint = fingerprint_dataset(&dataset_root)?;
        let config_toml = config.to_toml();
        let run_id = sha256_hex(format!("{config_toml}\u{1f}{fingerprint}").as_bytes())
            [..12]
            .to_string();

        let run_dir = out_dir.join(&run_id);
        std::fs::create_dir_all(&run_dir)
            .map_err(|e| CliError::runtime(format!("creating {}: {e}", run_dir.display())))?;

        let manifest = match RunManifest::load(&run_dir)? {
            Some(existing) => {
                if existing.dataset_fingerprint != fingerprint {
                    return Err(CliError::ArtifactCorrupt(format!(
                        "dataset under {} changed since run {run_id} was created",
                        dataset_root.display()
                    )));
                }
                existing
            }
            None => {
                let manifest = RunManifest::new(
                    run_id.clone(),
                    config.data.root.clone(),
                    fingerprint,
                    config_toml.clone(),
                );
                manifest.save(&run_dir)?;
                std::fs::write(run_dir.join("config.toml"), &config_toml)
                    .map_err(|e| CliError::runtime(format!("writing config snapshot: {e}")))?;
                manifest
            }
        };

        Ok(Self {
            config,
            run_dir,
            run_id,
            force,
            manifest,
        })
    }

    fn layout(&self) -> Layout {
        match self.config.data.layout.as_str() {
            "single_dir" => Layout::SingleDir,
            _ => Layout::SmdLike,
        }
    }

    fn missing_policy(&self) -> MissingPolicy {
        match self.config.data.missing_values.as_str() {
            "forward_fill" => MissingPolicy::ForwardFill,
            _ => MissingPolicy::Reject,
        }
    }

    pub fn load_datasets(&self) -> Result<Vec<DeviceDataset>, CliError> {
        ingest_dataset(
            Path::new(&self.config.data.root),
            self.layout(),
            self.missing_policy(),
        )
        .map_err(CliError::runtime_from)
    }

    fn f1_mode(&self) -> F1Mode {
        F1Mode::parse(&self.config.eval.f1_mode).unwrap_or(F1Mode::Pointwise)
    }

    fn train_settings(&self) -> Result<TrainSettings, CliError> {
        Ok(TrainSettings {
            model: self.config.autoencoder_config().map_err(CliError::config)?,
            train_stride: self.config.strategy.train_stride,
            val_fraction: self.config.strategy.val_fraction,
            global_seed: self.config.strategy.seed,
        })
    }

    /// Skip already-completed stages unless `--force`.
    fn should_skip(&self, stage: &str) -> Result<bool, CliError> {
        if self.force {
            return Ok(false);
        }
        let intact = self.manifest.stage_intact(&self.run_dir, stage)?;
        if intact {
            println!("{stage}: up to date in run {}, skipping (--force to rerun)", self.run_id);
        }
        Ok(intact)
    }

    fn finish_stage(&mut self, stage: &str, artifacts: &[PathBuf]) -> Result<(), CliError> {
        self.manifest.record_stage(&self.run_dir, stage, artifacts)?;
        log::info!("stage {stage} complete ({} artifacts)", artifacts.len());
        println!("{stage}: done -> {}", self.run_dir.display());
        Ok(())
    }

    fn write_artifact(&self, rel: &str, content: &str) -> Result<PathBuf, CliError> {
        let path = self.run_dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::runtime(format!("creating {}: {e}", parent.display())))?;
        }
        std::fs::write(&path, content)
            .map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))?;
        Ok(path)
    }

    // --- Stages --------------------------------------------------------

    pub fn inspect(&mut self) -> Result<(), CliError> {
        if self.should_skip("inspect")? {
            return Ok(());
        }
        let datasets = self.load_datasets()?;
        let mut out = String::new();
        for ds in &datasets {
            let _ = writeln!(
                out,
                "device={} metrics={} t_train={} t_test={} labeled={} gaps_filled={}",
                ds.device_id,
                ds.n_metrics(),
                ds.train.n_cols(),
                ds.test.as_ref().map_or(0, |t| t.n_cols()),
                ds.test_labels.is_some(),
                ds.gaps_filled
            );
        }
        let path = self.write_artifact("inspect.txt", &out)?;
        print!("{out}");
        self.finish_stage("inspect", &[path])
    }

    pub fn select_metrics_stage(&mut self) -> Result<(), CliError> {
        if self.should_skip("select-metrics")? {
            return Ok(());
        }
        let datasets = self.load_datasets()?;
        let top_n = self.config.data.top_n.min(datasets[0].n_metrics());
        let subset = select_metrics(
            &datasets,
            top_n,
            self.config.data.zero_fraction_limit,
            self.config.data.collinearity_threshold,
        )
        .map_err(CliError::runtime_from)?;
        let path = self.write_artifact("metric_subset.txt", &subset.to_report())?;
        self.finish_stage("select-metrics", &[path])
    }

    fn load_metric_subset(&self) -> Result<MetricSubset, CliError> {
        let path =
            self.manifest
                .require_artifact(&self.run_dir, "select-metrics", "metric_subset.txt")?;
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::runtime(format!("reading metric subset: {e}")))?;
        MetricSubset::from_report(&text).map_err(CliError::runtime_from)
    }

    fn build_graph(&self, datasets: &[DeviceDataset]) -> Result<SimilarityGraph, CliError> {
        let subset = self.load_metric_subset()?;
        let scaled = scale_by_range(datasets, &subset, self.config.data.full_minmax)
            .map_err(CliError::runtime_from)?;
        let dists = estimate_distributions(&scaled, self.config.similarity.bins)
            .map_err(CliError::runtime_from)?;
        build_similarity_graph(&dists).map_err(CliError::runtime_from)
    }

    pub fn similarity(&mut self) -> Result<(), CliError> {
        if self.should_skip("similarity")? {
            return Ok(());
        }
        let datasets = self.load_datasets()?;
        let graph = self.build_graph(&datasets)?;
        let path = self.write_artifact("similarity_graph.txt", &graph.to_edge_list())?;
        self.finish_stage("similarity", &[path])
    }

    fn load_graph(&self) -> Result<SimilarityGraph, CliError> {
        let path =
            self.manifest
                .require_artifact(&self.run_dir, "similarity", "similarity_graph.txt")?;
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::runtime(format!("reading similarity graph: {e}")))?;
        SimilarityGraph::from_edge_list(&text).map_err(CliError::runtime_from)
    }

    pub fn cluster(&mut self) -> Result<(), CliError> {
        if self.should_skip("cluster")? {
            return Ok(());
        }
        let graph = self.load_graph()?;
        let map = cluster_devices(&graph, self.config.clustering.k)
            .map_err(CliError::runtime_from)?;
        let path = self.write_artifact("clusters.txt", &map.to_report())?;
        print!("{}", map.to_report());
        self.finish_stage("cluster", &[path])
    }

    fn load_clusters(&self) -> Result<ClusterMap, CliError> {
        let path = self
            .manifest
            .require_artifact(&self.run_dir, "cluster", "clusters.txt")?;
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::runtime(format!("reading clusters: {e}")))?;
        ClusterMap::from_report(&text).map_err(CliError::runtime_from)
    }

    pub fn plan(&mut self) -> Result<(), CliError> {
        if self.should_skip("plan")? {
            return Ok(());
        }
        let graph = self.load_graph()?;
        let map = self.load_clusters()?;
        let plan = plan_training(&graph, &map).map_err(CliError::runtime_from)?;
        let path = self.write_artifact("training_plan.txt", &plan.to_report())?;
        print!("{}", plan.to_report());
        self.finish_stage("plan", &[path])
    }

    fn load_plan(&self) -> Result<TrainingPlan, CliError> {
        let path = self
            .manifest
            .require_artifact(&self.run_dir, "plan", "training_plan.txt")?;
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::runtime(format!("reading plan: {e}")))?;
        TrainingPlan::from_report(&text).map_err(CliError::runtime_from)
    }

    pub fn train(&mut self, strategy: Strategy) -> Result<(), CliError> {
        let stage = format!("train_{strategy}");
        if self.should_skip(&stage)? {
            return Ok(());
        }
        let datasets = self.load_datasets()?;
        let settings = self.train_settings()?;
        let run = match strategy {
            Strategy::Gm => run_gm(&datasets, &settings),
            Strategy::Mpd => run_mpd(&datasets, &settings),
            Strategy::Cm => {
                let map = self.load_clusters()?;
                run_cm(&datasets, &map, &settings)
            }
            Strategy::Icptl => {
                let plan = self.load_plan()?;
                run_icptl(&datasets, &plan, &settings)
            }
        }
        .map_err(CliError::runtime_from)?;

        let mut artifacts = Vec::new();
        let model_dir = self.run_dir.join(format!("train_{strategy}/models"));
        std::fs::create_dir_all(&model_dir)
            .map_err(|e| CliError::runtime(format!("creating {}: {e}", model_dir.display())))?;
        for (key, model) in &run.models {
            let path = model_dir.join(format!("{key}.fadm"));
            save_model(model, &path).map_err(CliError::runtime_from)?;
            artifacts.push(path);
        }
        artifacts.push(self.write_artifact(
            &format!("train_{strategy}/routing.txt"),
            &run.routing_report(),
        )?);
        artifacts.push(self.write_artifact(
            &format!("train_{strategy}/cost.txt"),
            &format!("{}\n", run.cost.report_line()),
        )?);
        println!(
            "{strategy}: {} models, {} epochs, {} ms",
            run.cost.models_trained,
            run.cost.total_epochs,
            run.cost.total_wall_time.as_millis()
        );
        self.finish_stage(&stage, &artifacts)
    }

    /// Strategies with a completed train stage, in a fixed order.
    fn trained_strategies(&self) -> Vec<Strategy> {
        [Strategy::Gm, Strategy::Cm, Strategy::Icptl, Strategy::Mpd]
            .into_iter()
            .filter(|s| self.manifest.stage(&format!("train_{s}")).is_some())
            .collect()
    }

    fn load_run(&self, strategy: Strategy) -> Result<StrategyRun, CliError> {
        let stage = format!("train_{strategy}");
        let routing_path =
            self.manifest
                .require_artifact(&self.run_dir, &stage, &format!("train_{strategy}/routing.txt"))?;
        let routing = StrategyRun::parse_routing(
            &std::fs::read_to_string(routing_path)
                .map_err(|e| CliError::runtime(format!("reading routing: {e}")))?,
        )
        .map_err(CliError::runtime_from)?;

        let cost_path = self.manifest.require_artifact(
            &self.run_dir,
            &stage,
            &format!("train_{strategy}/cost.txt"),
        )?;
        let cost_text = std::fs::read_to_string(cost_path)
            .map_err(|e| CliError::runtime(format!("reading cost: {e}")))?;
        let cost = parse_cost_line(cost_text.trim())?;

        let mut models = BTreeMap::new();
        let record = self
            .manifest
            .stage(&stage)
            .expect("stage presence checked above");
        for artifact in &record.artifacts {
            if artifact.path.ends_with(".fadm") {
                let path = self.manifest.require_artifact(
                    &self.run_dir,
                    &stage,
                    &artifact.path,
                )?;
                let model = load_model(&path).map_err(CliError::runtime_from)?;
                models.insert(model.id.clone(), model);
            }
        }
        Ok(StrategyRun {
            strategy,
            models,
            routing,
            cost,
        })
    }

    pub fn evaluate(&mut self) -> Result<(), CliError> {
        if self.should_skip("evaluate")? {
            return Ok(());
        }
        let strategies = self.trained_strategies();
        if strategies.is_empty() {
            return Err(CliError::StageDependencyMissing(
                "no train stage has run (train at least one strategy first)".into(),
            ));
        }
        let datasets = self.load_datasets()?;
        let runs: Vec<StrategyRun> = strategies
            .iter()
            .map(|&s| self.load_run(s))
            .collect::<Result<_, _>>()?;
        let report =
            compare_strategies(&runs, &datasets, self.f1_mode()).map_err(CliError::runtime_from)?;

        let mut artifacts = Vec::new();
        artifacts.push(self.write_artifact("evaluation.txt", &report.machine_text())?);
        for row in &report.rows {
            artifacts.push(self.write_artifact(
                &format!("scores/{}/{}.txt", row.strategy, row.device_id),
                &row.scores.to_text(),
            )?);
        }
        print!("{}", report.human_text());
        self.finish_stage("evaluate", &artifacts)
    }

    pub fn report(&mut self) -> Result<(), CliError> {
        if self.should_skip("report")? {
            return Ok(());
        }
        let path = self
            .manifest
            .require_artifact(&self.run_dir, "evaluate", "evaluation.txt")?;
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::runtime(format!("reading evaluation: {e}")))?;
        let rendered = render_report(&text)?;
        let out = self.write_artifact("report.txt", &rendered)?;
        print!("{rendered}");
        self.finish_stage("report", &[out])
    }

    pub fn sweep_k(
        &mut self,
        k_min: usize,
        k_max: usize,
        strategy: Strategy,
    ) -> Result<(), CliError> {
        if !matches!(strategy, Strategy::Cm | Strategy::Icptl) {
            return Err(CliError::ConfigInvalid(
                "sweep-k supports the cm and icptl strategies".into(),
            ));
        }
        if k_min == 0 || k_min > k_max {
            return Err(CliError::ConfigInvalid(format!(
                "empty or invalid K range {k_min}..{k_max}"
            )));
        }
        let stage = format!("sweep_{strategy}_{k_min}_{k_max}");
        if self.should_skip(&stage)? {
            return Ok(());
        }
        let graph = self.load_graph()?;
        let datasets = self.load_datasets()?;
        let settings = self.train_settings()?;
        if k_max > graph.len() {
            return Err(CliError::ConfigInvalid(format!(
                "k_max {k_max} exceeds the {} devices in the graph",
                graph.len()
            )));
        }

        let mut out = String::from("k,mean_auc,mean_f1,models,epochs,wall_ms\n");
        for k in k_min..=k_max {
            let map = cluster_devices(&graph, k).map_err(CliError::runtime_from)?;
            let run = match strategy {
                Strategy::Cm => run_cm(&datasets, &map, &settings),
                Strategy::Icptl => {
                    let plan = plan_training(&graph, &map).map_err(CliError::runtime_from)?;
                    run_icptl(&datasets, &plan, &settings)
                }
                _ => unreachable!("filtered above"),
            }
            .map_err(CliError::runtime_from)?;
            let report = compare_strategies(&[run], &datasets, self.f1_mode())
                .map_err(CliError::runtime_from)?;
            let agg = &report.aggregates[0];
            let _ = writeln!(
                out,
                "{k},{:.6},{:.6},{},{},{}",
                agg.mean_auc, agg.mean_f1, agg.models_trained, agg.total_epochs, agg.wall_ms
            );
        }
        let path = self.write_artifact(&format!("sweep_{strategy}.txt"), &out)?;
        print!("{out}");
        self.finish_stage(&stage, &[path])
    }

    pub fn fleet_event(&mut self, event_kind: &str, device: &str) -> Result<(), CliError> {
        let event = match event_kind {
            "added" => FleetEvent::DeviceAdded(device.to_string()),
            "removed" => FleetEvent::DeviceRemoved(device.to_string()),
            "drifted" => FleetEvent::DeviceDrifted(device.to_string()),
            other => {
                return Err(CliError::ConfigInvalid(format!(
                    "unknown event `{other}` (expected added, removed or drifted)"
                )))
            }
        };
        let cluster_map = self.load_clusters()?;
        let plan = self.load_plan()?;

        // Rebuild the graph from the data as it is now; the saved metric
        // subset keeps the similarity space fixed.
        let datasets = self.load_datasets()?;
        let graph = self.build_graph(&datasets)?;
        let state = FleetState {
            graph,
            cluster_map,
            plan,
        };
        let outcome = handle_fleet_event(
            &event,
            state,
            self.config.strategy.cm_retrain_jaccard,
        )
        .map_err(CliError::runtime_from)?;

        let mut log_line = format!(
            "event={event_kind} device={device} icptl_actions=[{}] cm_actions=[{}]",
            format_actions(&outcome.icptl_actions),
            format_actions(&outcome.cm_actions),
        );
        log_line.push('\n');

        let graph_path =
            self.write_artifact("similarity_graph.txt", &outcome.state.graph.to_edge_list())?;
        let cluster_path =
            self.write_artifact("clusters.txt", &outcome.state.cluster_map.to_report())?;
        let plan_path =
            self.write_artifact("training_plan.txt", &outcome.state.plan.to_report())?;

        let events_path = self.run_dir.join("fleet_events.txt");
        let mut existing = std::fs::read_to_string(&events_path).unwrap_or_default();
        existing.push_str(&log_line);
        std::fs::write(&events_path, existing)
            .map_err(|e| CliError::runtime(format!("writing event log: {e}")))?;

        print!("{log_line}");
        self.manifest
            .record_stage(&self.run_dir, "similarity", &[graph_path])?;
        self.manifest
            .record_stage(&self.run_dir, "cluster", &[cluster_path])?;
        self.manifest
            .record_stage(&self.run_dir, "plan", &[plan_path])?;
        self.manifest.record_stage(
            &self.run_dir,
            "fleet-event",
            &[events_path],
        )?;
        Ok(())
    }
}

fn parse_cost_line(line: &str) -> Result<TrainingCost, CliError> {
    let parts: Vec<&str> = line.split(',').collect();
    if parts.len() != 3 {
        return Err(CliError::ArtifactCorrupt(format!(
            "cost line `{line}` is not models,epochs,wall_ms"
        )));
    }
    let bad = |what: &str| CliError::ArtifactCorrupt(format!("bad {what} in cost line"));
    Ok(TrainingCost {
        models_trained: parts[0].parse().map_err(|_| bad("model count"))?,
        total_epochs: parts[1].parse().map_err(|_| bad("epoch count"))?,
        total_wall_time: Duration::from_millis(parts[2].parse().map_err(|_| bad("wall time"))?),
    })
}

fn format_actions(actions: &[RetrainAction]) -> String {
    actions
        .iter()
        .map(|a| match a {
            RetrainAction::TransferFromNeighbor { device, source } => {
                format!("transfer:{device}<-{source}")
            }
            RetrainAction::RetrainClusterModel { cluster_id } => {
                format!("retrain_cluster:{cluster_id}")
            }
        })
        .collect::<Vec<_>>()
        .join(",")
}

/// Render the human report from the machine-readable evaluation lines
/// (7 fields per device row, 6 per strategy footer).
fn render_report(machine: &str) -> Result<String, CliError> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<8} {:<12} {:>8} {:>8} {:>10} {:>8}",
        "strategy", "device", "auc", "f1", "precision", "recall"
    );
    let mut footers = Vec::new();
    for line in machine.lines() {
        let parts: Vec<&str> = line.split(',').collect();
        match parts.len() {
            7 => {
                let _ = writeln!(
                    out,
                    "{:<8} {:<12} {:>8} {:>8} {:>10} {:>8}",
                    parts[0], parts[1], parts[2], parts[3], parts[4], parts[5]
                );
            }
            6 => footers.push(parts.iter().map(|s| s.to_string()).collect::<Vec<_>>()),
            _ => {
                return Err(CliError::ArtifactCorrupt(format!(
                    "unrecognized evaluation line `{line}`"
                )))
            }
        }
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<8} {:>9} {:>9} {:>7} {:>7} {:>9}",
        "strategy", "mean_auc", "mean_f1", "models", "epochs", "wall_ms"
    );
    for f in footers {
        let _ = writeln!(
            out,
            "{:<8} {:>9} {:>9} {:>7} {:>7} {:>9}",
            f[0], f[1], f[2], f[3], f[4], f[5]
        );
    }
    Ok(out)
}

/// `genfleet`: generate a synthetic fleet into the configured dataset root.
/// Standalone: no run directory is created.
pub fn genfleet(
    config_path: Option<&Path>,
    spec_path: &Path,
    seed_override: Option<u64>,
) -> Result<(), CliError> {
    let config = match config_path {
        Some(path) => PipelineConfig::load(path).map_err(CliError::config)?,
        None => PipelineConfig::default(),
    };
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| CliError::ConfigInvalid(format!("reading {}: {e}", spec_path.display())))?;
    let mut spec = SyntheticFleetSpec::from_toml(&text).map_err(CliError::config)?;
    if let Some(seed) = seed_override {
        spec.seed = seed;
    }
    let datasets = generate_fleet(&spec).map_err(CliError::runtime_from)?;
    let root = PathBuf::from(&config.data.root);
    fleetad_core::data::write_dataset(&datasets, &root).map_err(CliError::runtime_from)?;
    println!(
        "wrote {} devices ({} metrics, t_train={}, t_test={}) to {}",
        spec.n_devices,
        spec.n_metrics,
        spec.t_train,
        spec.t_test,
        root.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_line_roundtrip() {
        let cost = TrainingCost {
            models_trained: 3,
            total_epochs: 42,
            total_wall_time: Duration::from_millis(1234),
        };
        let parsed = parse_cost_line(&cost.report_line()).unwrap();
        assert_eq!(parsed, cost);
    }

    #[test]
    fn report_rendering_survives_both_line_kinds() {
        let machine = "gm,device-00,0.9,0.8,0.7,0.95,1.0e0\ngm,0.9,0.8,1,10,123\n";
        let rendered = render_report(machine).unwrap();
        assert!(rendered.contains("device-00"));
        assert!(rendered.contains("mean_auc"));
    }
}
