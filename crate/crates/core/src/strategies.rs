//! Fleet training strategies and their cost accounting.
//!
//! Four ways to train detectors for `N` devices in `K` clusters, with full
//! epoch budget `L` and fine-tune budget `l`:
//!
//! * `gm`   — one model on everyone's pooled data (1 model, ~`L` epochs)
//! * `cm`   — one model per cluster on pooled member data (`K`, ~`K*L`)
//! * `icptl`— per-device models; cluster roots train from scratch, every
//!   other device fine-tunes from its MST predecessor (`N`, ~`K*L + (N-K)*l`)
//! * `mpd`  — one model per device from scratch (`N`, ~`N*L`)
//!
//! Pooled training sets (`gm`, `cm`) are decimated to the members' mean
//! per-device window count with evenly spaced sampling, so one epoch costs
//! about the same for every model and the epoch totals above are also the
//! wall-time proportions. Per-model seeds derive from the member set, which
//! makes the coincidence laws exact: `cm` with one cluster equals `gm`, `cm`
//! with singleton clusters equals `mpd`, and `icptl` over singleton clusters
//! equals `mpd`, parameter for parameter.
//!
//! Models train independently, so with the `parallel` feature the per-model
//! loop runs on rayon; within an `icptl` cluster the chain stays sequential
//! because each target needs its source's final parameters. Reported wall
//! time is the *sum* of per-model training times (the aggregate cost a fleet
//! operator pays), which is scheduling-independent.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Duration;

use thiserror::Error;

use crate::clustering::{
    plan_training, reassign_device, ClusterMap, ClusterPlan, ClusteringError, ReassignOutcome,
    TrainingPlan,
};
use crate::data::{make_windows, DataError, DeviceDataset, Split, WindowSet};
use crate::model::{
    init_model, train, transfer_train, AutoencoderConfig, ModelError, TrainedModel,
};
use crate::seed;
use crate::similarity::SimilarityGraph;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("no datasets")]
    NoDatasets,
    #[error("cluster {0} is empty")]
    EmptyCluster(usize),
    #[error("plan/datasets mismatch: {0}")]
    PlanMismatch(String),
    #[error("unknown device `{0}`")]
    UnknownDevice(String),
    #[error("stale state: {0}")]
    StaleState(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Clustering(#[from] ClusteringError),
    #[error(transparent)]
    Graph(#[from] crate::similarity::SimilarityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Gm,
    Mpd,
    Cm,
    Icptl,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Gm => "gm",
            Strategy::Mpd => "mpd",
            Strategy::Cm => "cm",
            Strategy::Icptl => "icptl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gm" => Some(Strategy::Gm),
            "mpd" => Some(Strategy::Mpd),
            "cm" => Some(Strategy::Cm),
            "icptl" => Some(Strategy::Icptl),
            _ => None,
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything a strategy run needs besides the datasets.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    /// Architecture and budgets; the per-model seed is filled in per model.
    pub model: AutoencoderConfig,
    pub train_stride: usize,
    pub val_fraction: f64,
    pub global_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainingCost {
    pub models_trained: usize,
    pub total_epochs: usize,
    pub total_wall_time: Duration,
}

impl TrainingCost {
    /// `models_trained,total_epochs,wall_time_ms` report line.
    pub fn report_line(&self) -> String {
        format!(
            "{},{},{}",
            self.models_trained,
            self.total_epochs,
            self.total_wall_time.as_millis()
        )
    }
}

/// Outcome of one strategy over a fleet: the models, which model serves
/// each device, and what training cost.
#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub strategy: Strategy,
    pub models: BTreeMap<String, TrainedModel>,
    pub routing: BTreeMap<String, String>,
    pub cost: TrainingCost,
}

impl StrategyRun {
    pub fn routing_report(&self) -> String {
        let mut out = String::new();
        for (device, model) in &self.routing {
            let _ = writeln!(out, "device={device} model={model}");
        }
        out
    }

    pub fn parse_routing(text: &str) -> Result<BTreeMap<String, String>, StrategyError> {
        let mut routing = BTreeMap::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let rest = line
                .strip_prefix("device=")
                .ok_or_else(|| StrategyError::StaleState("bad routing line".into()))?;
            let (device, model) = rest
                .split_once(" model=")
                .ok_or_else(|| StrategyError::StaleState("bad routing line".into()))?;
            routing.insert(device.to_string(), model.to_string());
        }
        Ok(routing)
    }

    fn tally_cost(&mut self) {
        self.cost.models_trained = self.models.len();
        self.cost.total_epochs = self
            .models
            .values()
            .map(|m| m.provenance.epochs_run)
            .sum();
        self.cost.total_wall_time = self
            .models
            .values()
            .filter_map(|m| m.provenance.wall_time)
            .sum();
    }
}

/// Training and validation windows for one model.
struct ModelData {
    train: WindowSet,
    val: Option<WindowSet>,
    seed: u64,
}

/// Assemble the training set for a model over `members` (already sorted).
///
/// Each member contributes evenly spaced windows so the pooled total matches
/// the members' mean window count; the chronological tail of each member's
/// sample becomes validation data. For a single member this is the identity
/// (no decimation), which is what makes `cm` on singleton clusters
/// bit-compatible with `mpd`.
fn assemble_model_data(
    members: &[&DeviceDataset],
    settings: &TrainSettings,
) -> Result<ModelData, StrategyError> {
    let w = settings.model.window_size;
    let per_member: Vec<WindowSet> = members
        .iter()
        .map(|ds| make_windows(ds, Split::Train, w, settings.train_stride))
        .collect::<Result<_, _>>()?;

    let total: usize = per_member.iter().map(WindowSet::count).sum();
    let n = members.len();
    let target = (total + n / 2) / n; // mean member count, rounded

    let mut train_parts = Vec::with_capacity(n);
    let mut val_parts = Vec::new();
    for ws in &per_member {
        let count = ws.count();
        let take = if n == 1 {
            count
        } else {
            ((target * count + total / 2) / total).min(count).max(1)
        };
        let indices: Vec<usize> = (0..take).map(|j| j * count / take).collect();
        let sampled = ws.take(&indices);

        let n_val = ((take as f64) * settings.val_fraction).round() as usize;
        let n_val = n_val.min(take.saturating_sub(1));
        let split_at = take - n_val;
        train_parts.push(sampled.take(&(0..split_at).collect::<Vec<_>>()));
        if n_val > 0 {
            val_parts.push(sampled.take(&(split_at..take).collect::<Vec<_>>()));
        }
    }

    let train = WindowSet::concat(&train_parts.iter().collect::<Vec<_>>());
    let val = if val_parts.is_empty() {
        None
    } else {
        Some(WindowSet::concat(&val_parts.iter().collect::<Vec<_>>()))
    };
    let member_ids: Vec<&str> = members.iter().map(|d| d.device_id.as_str()).collect();
    Ok(ModelData {
        train,
        val,
        seed: seed::model_seed(settings.global_seed, &member_ids),
    })
}

fn train_one(
    model_id: &str,
    strategy: Strategy,
    members: &[&DeviceDataset],
    budget: usize,
    settings: &TrainSettings,
) -> Result<TrainedModel, StrategyError> {
    let data = assemble_model_data(members, settings)?;
    let n_metrics = members[0].n_metrics();
    let mut model = init_model(&settings.model, n_metrics, data.seed)?;
    model.id = model_id.to_string();
    model.provenance.strategy = strategy.as_str().to_string();
    let trained = train(model, &data.train, data.val.as_ref(), budget)?;
    Ok(trained)
}

fn sorted_refs(datasets: &[DeviceDataset]) -> Vec<&DeviceDataset> {
    let mut refs: Vec<&DeviceDataset> = datasets.iter().collect();
    refs.sort_by(|a, b| a.device_id.cmp(&b.device_id));
    refs
}

fn dataset_index<'a>(datasets: &'a [DeviceDataset]) -> BTreeMap<&'a str, &'a DeviceDataset> {
    datasets
        .iter()
        .map(|d| (d.device_id.as_str(), d))
        .collect()
}

/// One generic model trained on everyone's pooled data.
pub fn run_gm(
    datasets: &[DeviceDataset],
    settings: &TrainSettings,
) -> Result<StrategyRun, StrategyError> {
    if datasets.is_empty() {
        return Err(StrategyError::NoDatasets);
    }
    let members = sorted_refs(datasets);
    let model = train_one(
        "global",
        Strategy::Gm,
        &members,
        settings.model.max_epochs,
        settings,
    )?;
    let routing = members
        .iter()
        .map(|d| (d.device_id.clone(), "global".to_string()))
        .collect();
    let mut run = StrategyRun {
        strategy: Strategy::Gm,
        models: BTreeMap::from([("global".to_string(), model)]),
        routing,
        cost: TrainingCost::default(),
    };
    run.tally_cost();
    Ok(run)
}

/// One model per device, trained from scratch on its own data.
pub fn run_mpd(
    datasets: &[DeviceDataset],
    settings: &TrainSettings,
) -> Result<StrategyRun, StrategyError> {
    if datasets.is_empty() {
        return Err(StrategyError::NoDatasets);
    }
    let members = sorted_refs(datasets);
    let budget = settings.model.max_epochs;

    let task = |ds: &&DeviceDataset| -> Result<(String, TrainedModel), StrategyError> {
        let model = train_one(&ds.device_id, Strategy::Mpd, &[ds], budget, settings)?;
        Ok((ds.device_id.clone(), model))
    };
    #[cfg(feature = "parallel")]
    let results: Result<Vec<_>, _> = members.par_iter().map(task).collect();
    #[cfg(not(feature = "parallel"))]
    let results: Result<Vec<_>, _> = members.iter().map(task).collect();

    let models: BTreeMap<String, TrainedModel> = results?.into_iter().collect();
    let routing = models
        .keys()
        .map(|id| (id.clone(), id.clone()))
        .collect();
    let mut run = StrategyRun {
        strategy: Strategy::Mpd,
        models,
        routing,
        cost: TrainingCost::default(),
    };
    run.tally_cost();
    Ok(run)
}

/// One model per cluster on the cluster's pooled data.
pub fn run_cm(
    datasets: &[DeviceDataset],
    cluster_map: &ClusterMap,
    settings: &TrainSettings,
) -> Result<StrategyRun, StrategyError> {
    if datasets.is_empty() {
        return Err(StrategyError::NoDatasets);
    }
    check_coverage(datasets, &cluster_map.devices())?;
    let index = dataset_index(datasets);
    let budget = settings.model.max_epochs;

    let clusters: Vec<(usize, Vec<&DeviceDataset>)> = cluster_map
        .clusters()
        .map(|(id, members)| {
            if members.is_empty() {
                return Err(StrategyError::EmptyCluster(id));
            }
            Ok((id, members.iter().map(|m| index[m.as_str()]).collect()))
        })
        .collect::<Result<_, _>>()?;

    let task = |(id, members): &(usize, Vec<&DeviceDataset>)| {
        let key = format!("cluster-{id}");
        let model = train_one(&key, Strategy::Cm, members, budget, settings)?;
        Ok::<_, StrategyError>((key, model))
    };
    #[cfg(feature = "parallel")]
    let results: Result<Vec<_>, _> = clusters.par_iter().map(task).collect();
    #[cfg(not(feature = "parallel"))]
    let results: Result<Vec<_>, _> = clusters.iter().map(task).collect();

    let models: BTreeMap<String, TrainedModel> = results?.into_iter().collect();
    let mut routing = BTreeMap::new();
    for (id, members) in cluster_map.clusters() {
        for device in members {
            routing.insert(device.clone(), format!("cluster-{id}"));
        }
    }
    let mut run = StrategyRun {
        strategy: Strategy::Cm,
        models,
        routing,
        cost: TrainingCost::default(),
    };
    run.tally_cost();
    Ok(run)
}

/// Per-device models trained along each cluster's MST: the root from
/// scratch with the full budget, every other device fine-tuned from its
/// step's source model with the transfer budget.
pub fn run_icptl(
    datasets: &[DeviceDataset],
    plan: &TrainingPlan,
    settings: &TrainSettings,
) -> Result<StrategyRun, StrategyError> {
    if datasets.is_empty() {
        return Err(StrategyError::NoDatasets);
    }
    let plan_devices = plan.devices();
    check_coverage(datasets, &plan_devices)?;
    let index = dataset_index(datasets);
    let full_budget = settings.model.max_epochs;

    let cluster_task = |cluster: &ClusterPlan| -> Result<Vec<TrainedModel>, StrategyError> {
        let mut trained = Vec::with_capacity(cluster.steps.len() + 1);
        let root_ds = index
            .get(cluster.root.as_str())
            .ok_or_else(|| StrategyError::UnknownDevice(cluster.root.clone()))?;
        let root =
            train_one(&cluster.root, Strategy::Icptl, &[root_ds], full_budget, settings)?;
        trained.push(root);

        for step in &cluster.steps {
            let source = trained
                .iter()
                .find(|m| m.id == step.source)
                .ok_or_else(|| {
                    StrategyError::PlanMismatch(format!(
                        "step source {} not trained before target {}",
                        step.source, step.target
                    ))
                })?;
            let target_ds = index
                .get(step.target.as_str())
                .ok_or_else(|| StrategyError::UnknownDevice(step.target.clone()))?;
            let data = assemble_model_data(&[target_ds], settings)?;
            let mut cfg = settings.model.clone();
            cfg.seed = data.seed;
            let model =
                transfer_train(source, &step.target, &data.train, data.val.as_ref(), &cfg)?;
            trained.push(model);
        }
        Ok(trained)
    };

    #[cfg(feature = "parallel")]
    let results: Result<Vec<_>, _> = plan.clusters.par_iter().map(cluster_task).collect();
    #[cfg(not(feature = "parallel"))]
    let results: Result<Vec<_>, _> = plan.clusters.iter().map(cluster_task).collect();

    let mut models = BTreeMap::new();
    for cluster_models in results? {
        for model in cluster_models {
            models.insert(model.id.clone(), model);
        }
    }
    let routing = models
        .keys()
        .map(|id| (id.clone(), id.clone()))
        .collect();
    let mut run = StrategyRun {
        strategy: Strategy::Icptl,
        models,
        routing,
        cost: TrainingCost::default(),
    };
    run.tally_cost();
    Ok(run)
}

fn check_coverage(
    datasets: &[DeviceDataset],
    covered: &BTreeSet<String>,
) -> Result<(), StrategyError> {
    let dataset_ids: BTreeSet<String> =
        datasets.iter().map(|d| d.device_id.clone()).collect();
    if &dataset_ids != covered {
        let missing: Vec<&String> = dataset_ids.symmetric_difference(covered).collect();
        return Err(StrategyError::PlanMismatch(format!(
            "device sets differ on {missing:?}"
        )));
    }
    Ok(())
}

// --- Fleet dynamism ----------------------------------------------------------

/// A change in the fleet after initial deployment. The similarity graph in
/// the state must already reflect the change (new/updated edges for added or
/// drifted devices).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FleetEvent {
    DeviceAdded(String),
    DeviceRemoved(String),
    DeviceDrifted(String),
}

/// Clustering-side state a fleet event acts on.
#[derive(Debug, Clone)]
pub struct FleetState {
    pub graph: SimilarityGraph,
    pub cluster_map: ClusterMap,
    pub plan: TrainingPlan,
}

/// Retraining work a fleet event demands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RetrainAction {
    /// Fine-tune `device`'s model starting from `source`'s model.
    TransferFromNeighbor { device: String, source: String },
    /// Retrain the pooled model of a cluster whose membership changed
    /// beyond the configured fraction.
    RetrainClusterModel { cluster_id: usize },
}

#[derive(Debug, Clone)]
pub struct FleetEventOutcome {
    pub state: FleetState,
    /// What the per-device transfer-learning strategy must retrain.
    pub icptl_actions: Vec<RetrainAction>,
    /// What the cluster-model strategy must retrain.
    pub cm_actions: Vec<RetrainAction>,
}

/// Fraction of membership that changed: 1 - |old ∩ new| / |old ∪ new|.
fn membership_change(old: &BTreeSet<String>, new: &BTreeSet<String>) -> f64 {
    let intersection = old.intersection(new).count() as f64;
    let union = old.union(new).count() as f64;
    if union == 0.0 {
        0.0
    } else {
        1.0 - intersection / union
    }
}

/// Apply a fleet event to the clustering state and derive the retraining
/// actions each strategy needs.
///
/// * added: the device joins its nearest neighbour's cluster; `icptl`
///   fine-tunes a model for it from that neighbour; `cm` retrains the
///   receiving cluster only if its membership changed beyond
///   `cm_retrain_threshold`.
/// * removed: the cluster shrinks; `icptl` needs nothing; `cm` retrains the
///   shrunken cluster only beyond the threshold.
/// * drifted: edges were re-computed; if the nearest neighbour now lies in
///   another cluster the device moves there, `icptl` fine-tunes from the
///   new neighbour, and `cm` checks both the old and the new cluster.
pub fn handle_fleet_event(
    event: &FleetEvent,
    state: FleetState,
    cm_retrain_threshold: f64,
) -> Result<FleetEventOutcome, StrategyError> {
    let mut icptl_actions = Vec::new();
    let mut cm_actions = Vec::new();

    let (graph, new_map) = match event {
        FleetEvent::DeviceAdded(device) => {
            if state.cluster_map.contains(device) {
                return Err(StrategyError::StaleState(format!(
                    "{device} already assigned to a cluster"
                )));
            }
            if !state.graph.vertices().iter().any(|v| v == device) {
                return Err(StrategyError::UnknownDevice(device.clone()));
            }
            let reassignment = reassign_device(&state.graph, &state.cluster_map, device)?;
            debug_assert_eq!(reassignment.outcome, ReassignOutcome::JoinedExisting);
            icptl_actions.push(RetrainAction::TransferFromNeighbor {
                device: device.clone(),
                source: reassignment.nearest.clone(),
            });

            let new_map = reassignment.cluster_map;
            let new_cluster = new_map
                .cluster_of(device)
                .expect("device was just assigned");
            let old_members = state
                .cluster_map
                .cluster_of(&reassignment.nearest)
                .and_then(|id| state.cluster_map.members(id))
                .cloned()
                .unwrap_or_default();
            let new_members = new_map.members(new_cluster).cloned().unwrap_or_default();
            if membership_change(&old_members, &new_members) > cm_retrain_threshold {
                cm_actions.push(RetrainAction::RetrainClusterModel {
                    cluster_id: new_cluster,
                });
            }
            (state.graph, new_map)
        }
        FleetEvent::DeviceRemoved(device) => {
            let old_cluster = state
                .cluster_map
                .cluster_of(device)
                .ok_or_else(|| StrategyError::UnknownDevice(device.clone()))?;
            let old_members = state
                .cluster_map
                .members(old_cluster)
                .cloned()
                .unwrap_or_default();
            let new_map = state.cluster_map.without_device(device);
            let mut graph = state.graph;
            if graph.vertices().iter().any(|v| v == device) {
                graph.remove_vertex(device)?;
            }
            // The per-device strategy needs no retraining on removal.
            let survivors: BTreeSet<String> = old_members
                .iter()
                .filter(|m| m.as_str() != device)
                .cloned()
                .collect();
            if !survivors.is_empty()
                && membership_change(&old_members, &survivors) > cm_retrain_threshold
            {
                let surviving = survivors.iter().next().expect("non-empty");
                let new_id = new_map
                    .cluster_of(surviving)
                    .expect("survivor stays clustered");
                cm_actions.push(RetrainAction::RetrainClusterModel { cluster_id: new_id });
            }
            (graph, new_map)
        }
        FleetEvent::DeviceDrifted(device) => {
            let old_cluster = state
                .cluster_map
                .cluster_of(device)
                .ok_or_else(|| StrategyError::UnknownDevice(device.clone()))?;
            let old_source_members = state
                .cluster_map
                .members(old_cluster)
                .cloned()
                .unwrap_or_default();
            let reassignment = reassign_device(&state.graph, &state.cluster_map, device)?;
            let new_map = reassignment.cluster_map;
            if reassignment.outcome == ReassignOutcome::Moved {
                icptl_actions.push(RetrainAction::TransferFromNeighbor {
                    device: device.clone(),
                    source: reassignment.nearest.clone(),
                });
                // Source cluster lost the device.
                let source_survivors: BTreeSet<String> = old_source_members
                    .iter()
                    .filter(|m| m.as_str() != device)
                    .cloned()
                    .collect();
                if !source_survivors.is_empty()
                    && membership_change(&old_source_members, &source_survivors)
                        > cm_retrain_threshold
                {
                    let surviving = source_survivors.iter().next().expect("non-empty");
                    let id = new_map.cluster_of(surviving).expect("still clustered");
                    cm_actions.push(RetrainAction::RetrainClusterModel { cluster_id: id });
                }
                // Destination cluster gained it.
                let dest_id = new_map.cluster_of(device).expect("just moved");
                let dest_new = new_map.members(dest_id).cloned().unwrap_or_default();
                let dest_old: BTreeSet<String> = dest_new
                    .iter()
                    .filter(|m| m.as_str() != device)
                    .cloned()
                    .collect();
                if membership_change(&dest_old, &dest_new) > cm_retrain_threshold {
                    cm_actions.push(RetrainAction::RetrainClusterModel { cluster_id: dest_id });
                }
            }
            (state.graph, new_map)
        }
    };

    let plan = plan_training(&graph, &new_map)?;
    Ok(FleetEventOutcome {
        state: FleetState {
            graph,
            cluster_map: new_map,
            plan,
        },
        icptl_actions,
        cm_actions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Matrix;
    use crate::model::Activation;

    fn tiny_settings() -> TrainSettings {
        TrainSettings {
            model: AutoencoderConfig {
                window_size: 4,
                num_layers: 1,
                hidden_size: 3,
                batch_size: 16,
                learning_rate: 3e-3,
                max_epochs: 6,
                transfer_max_epochs: 2,
                early_stopping: false,
                early_stop_patience: 5,
                early_stop_min_delta: 1e-3,
                activation: Activation::Tanh,
                seed: 0,
            },
            train_stride: 2,
            val_fraction: 0.1,
            global_seed: 7,
        }
    }

    fn fleet(n: usize, t: usize) -> Vec<DeviceDataset> {
        (0..n)
            .map(|i| {
                let rows: Vec<f64> = (0..2 * t)
                    .map(|j| ((i * 131 + j * 17) % 97) as f64 / 97.0 + i as f64)
                    .collect();
                DeviceDataset {
                    device_id: format!("device-{i:02}"),
                    metric_names: vec!["m00".into(), "m01".into()],
                    train: Matrix::new(2, t, rows),
                    test: None,
                    test_labels: None,
                    gaps_filled: 0,
                }
            })
            .collect()
    }

    fn singleton_map(datasets: &[DeviceDataset]) -> ClusterMap {
        ClusterMap::from_groups(
            datasets
                .iter()
                .map(|d| BTreeSet::from([d.device_id.clone()]))
                .collect(),
        )
    }

    #[test]
    fn gm_single_device_matches_mpd() {
        let datasets = fleet(1, 80);
        let settings = tiny_settings();
        let gm = run_gm(&datasets, &settings).unwrap();
        let mpd = run_mpd(&datasets, &settings).unwrap();
        let gm_model = &gm.models["global"];
        let mpd_model = &mpd.models["device-00"];
        assert_eq!(gm_model.param_bytes(), mpd_model.param_bytes());
    }

    #[test]
    fn mpd_routes_each_device_to_itself() {
        let datasets = fleet(3, 60);
        let run = run_mpd(&datasets, &tiny_settings()).unwrap();
        assert_eq!(run.cost.models_trained, 3);
        for d in &datasets {
            assert_eq!(run.routing[&d.device_id], d.device_id);
        }
    }

    #[test]
    fn cost_budgets_without_early_stopping() {
        let datasets = fleet(4, 60);
        let settings = tiny_settings();
        let l = settings.model.max_epochs;
        let mpd = run_mpd(&datasets, &settings).unwrap();
        assert_eq!(mpd.cost.total_epochs, 4 * l);
        let gm = run_gm(&datasets, &settings).unwrap();
        assert_eq!(gm.cost.total_epochs, l);
    }

    #[test]
    fn icptl_singleton_clusters_match_mpd() {
        let datasets = fleet(3, 60);
        let settings = tiny_settings();
        let plan = TrainingPlan {
            clusters: singleton_map(&datasets)
                .clusters()
                .map(|(id, members)| ClusterPlan {
                    cluster_id: id,
                    root: members.iter().next().unwrap().clone(),
                    steps: Vec::new(),
                })
                .collect(),
        };
        let icptl = run_icptl(&datasets, &plan, &settings).unwrap();
        let mpd = run_mpd(&datasets, &settings).unwrap();
        for d in &datasets {
            assert_eq!(
                icptl.models[&d.device_id].param_bytes(),
                mpd.models[&d.device_id].param_bytes()
            );
        }
        assert_eq!(icptl.cost.total_epochs, mpd.cost.total_epochs);
    }

    #[test]
    fn icptl_budget_arithmetic() {
        // One cluster of 3: L + 2 * l epochs.
        let datasets = fleet(3, 60);
        let mut settings = tiny_settings();
        settings.model.max_epochs = 50;
        settings.model.transfer_max_epochs = 20;
        let plan = TrainingPlan {
            clusters: vec![ClusterPlan {
                cluster_id: 0,
                root: "device-00".into(),
                steps: vec![
                    crate::clustering::TransferStep {
                        source: "device-00".into(),
                        target: "device-01".into(),
                        weight: 0.1,
                    },
                    crate::clustering::TransferStep {
                        source: "device-01".into(),
                        target: "device-02".into(),
                        weight: 0.2,
                    },
                ],
            }],
        };
        let run = run_icptl(&datasets, &plan, &settings).unwrap();
        assert_eq!(run.cost.total_epochs, 50 + 2 * 20);
        assert_eq!(run.cost.models_trained, 3);
        assert_eq!(
            run.models["device-01"].provenance.source_model_id.as_deref(),
            Some("device-00")
        );
    }

    #[test]
    fn icptl_rejects_mismatched_plan() {
        let datasets = fleet(3, 60);
        let plan = TrainingPlan {
            clusters: vec![ClusterPlan {
                cluster_id: 0,
                root: "device-00".into(),
                steps: Vec::new(),
            }],
        };
        assert!(matches!(
            run_icptl(&datasets, &plan, &tiny_settings()),
            Err(StrategyError::PlanMismatch(_))
        ));
    }

    #[test]
    fn cluster_processing_order_does_not_matter() {
        let datasets = fleet(4, 60);
        let settings = tiny_settings();
        let make_plan = |order: &[usize]| TrainingPlan {
            clusters: order
                .iter()
                .map(|&i| ClusterPlan {
                    cluster_id: i,
                    root: format!("device-{:02}", 2 * i),
                    steps: vec![crate::clustering::TransferStep {
                        source: format!("device-{:02}", 2 * i),
                        target: format!("device-{:02}", 2 * i + 1),
                        weight: 0.1,
                    }],
                })
                .collect(),
        };
        let a = run_icptl(&datasets, &make_plan(&[0, 1]), &settings).unwrap();
        let b = run_icptl(&datasets, &make_plan(&[1, 0]), &settings).unwrap();
        for id in a.models.keys() {
            assert_eq!(a.models[id].param_bytes(), b.models[id].param_bytes());
        }
    }

    fn event_state() -> FleetState {
        let mut graph = SimilarityGraph::new(
            ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect(),
        );
        for (x, y, w) in [
            ("a", "b", 0.1),
            ("a", "c", 0.9),
            ("a", "d", 0.8),
            ("b", "c", 0.85),
            ("b", "d", 0.95),
            ("c", "d", 0.2),
        ] {
            graph.set_weight(x, y, w).unwrap();
        }
        let cluster_map = crate::clustering::cluster_devices(&graph, 2).unwrap();
        let plan = plan_training(&graph, &cluster_map).unwrap();
        FleetState {
            graph,
            cluster_map,
            plan,
        }
    }

    #[test]
    fn added_device_transfers_from_twin_and_cm_stays_put() {
        let mut state = event_state();
        let mut edges = BTreeMap::new();
        edges.insert("a".to_string(), 0.0); // identical to a
        edges.insert("b".to_string(), 0.1);
        edges.insert("c".to_string(), 0.9);
        edges.insert("d".to_string(), 0.8);
        state.graph.add_vertex("e", &edges).unwrap();

        // Threshold above the 1/3 membership change of a 2 -> 3 cluster.
        let outcome =
            handle_fleet_event(&FleetEvent::DeviceAdded("e".into()), state, 0.4).unwrap();
        assert_eq!(
            outcome.icptl_actions,
            vec![RetrainAction::TransferFromNeighbor {
                device: "e".into(),
                source: "a".into()
            }]
        );
        assert!(outcome.cm_actions.is_empty());
        assert_eq!(
            outcome.state.cluster_map.cluster_of("e"),
            outcome.state.cluster_map.cluster_of("a")
        );
    }

    #[test]
    fn added_device_can_trigger_cm_retrain() {
        let mut state = event_state();
        let mut edges = BTreeMap::new();
        edges.insert("a".to_string(), 0.0);
        edges.insert("b".to_string(), 0.1);
        edges.insert("c".to_string(), 0.9);
        edges.insert("d".to_string(), 0.8);
        state.graph.add_vertex("e", &edges).unwrap();
        let outcome =
            handle_fleet_event(&FleetEvent::DeviceAdded("e".into()), state, 0.25).unwrap();
        assert_eq!(outcome.cm_actions.len(), 1);
    }

    #[test]
    fn removed_device_needs_no_icptl_action() {
        let state = event_state();
        let outcome =
            handle_fleet_event(&FleetEvent::DeviceRemoved("b".into()), state, 0.25).unwrap();
        assert!(outcome.icptl_actions.is_empty());
        assert!(!outcome.state.cluster_map.contains("b"));
        assert!(!outcome.state.graph.vertices().iter().any(|v| v == "b"));
        // 2-member cluster losing one is a 1/2 change: above 0.25.
        assert_eq!(outcome.cm_actions.len(), 1);
    }

    #[test]
    fn drifted_device_moves_and_retrains_from_new_neighbor() {
        let mut state = event_state();
        let mut updates = BTreeMap::new();
        updates.insert("a".to_string(), 0.9);
        updates.insert("c".to_string(), 0.05);
        updates.insert("d".to_string(), 0.15);
        state.graph.update_vertex("b", &updates).unwrap();

        let outcome =
            handle_fleet_event(&FleetEvent::DeviceDrifted("b".into()), state, 0.25).unwrap();
        assert_eq!(
            outcome.icptl_actions,
            vec![RetrainAction::TransferFromNeighbor {
                device: "b".into(),
                source: "c".into()
            }]
        );
        // Source cluster {a, b} -> {a} is a 1/2 change; destination
        // {c, d} -> {b, c, d} is a 1/3 change: both above 0.25.
        assert_eq!(outcome.cm_actions.len(), 2);
        assert_eq!(
            outcome.state.cluster_map.cluster_of("b"),
            outcome.state.cluster_map.cluster_of("c")
        );
    }

    #[test]
    fn drift_without_cluster_change_is_quiet() {
        let mut state = event_state();
        let mut updates = BTreeMap::new();
        updates.insert("a".to_string(), 0.12); // still nearest
        updates.insert("c".to_string(), 0.7);
        updates.insert("d".to_string(), 0.6);
        state.graph.update_vertex("b", &updates).unwrap();
        let outcome =
            handle_fleet_event(&FleetEvent::DeviceDrifted("b".into()), state, 0.25).unwrap();
        assert!(outcome.icptl_actions.is_empty());
        assert!(outcome.cm_actions.is_empty());
    }

    #[test]
    fn routing_report_roundtrip() {
        let datasets = fleet(2, 60);
        let run = run_mpd(&datasets, &tiny_settings()).unwrap();
        let text = run.routing_report();
        let parsed = StrategyRun::parse_routing(&text).unwrap();
        assert_eq!(parsed, run.routing);
    }
}
