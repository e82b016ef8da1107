//! Device clustering over the similarity graph and per-cluster transfer
//! schedules.
//!
//! Clustering starts from singletons and repeatedly removes the globally
//! cheapest edge, merging the endpoint clusters when they differ, until `K`
//! clusters remain — Kruskal's algorithm stopped early, which on distinct
//! weights coincides with single-linkage agglomeration cut at `K`. The
//! transfer schedule for a cluster is its minimum spanning tree grown
//! Prim-style from the cheapest edge, emitting one `(source, target)` step
//! per non-root device.
//!
//! Ties are broken by the lexicographic device pair, so identical graphs
//! always yield identical output.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::similarity::SimilarityGraph;

#[derive(Debug, Error)]
pub enum ClusteringError {
    #[error("k = {k} out of range for {n} devices")]
    KOutOfRange { k: usize, n: usize },
    #[error("cluster is empty")]
    EmptyCluster,
    #[error("cluster is disconnected at {0}")]
    DisconnectedCluster(String),
    #[error("unknown device `{0}`")]
    UnknownDevice(String),
    #[error("graph error: {0}")]
    Graph(#[from] crate::similarity::SimilarityError),
    #[error("malformed report: {0}")]
    Malformed(String),
}

/// Partition of the device set into clusters. Cluster ids are assigned by
/// the lexicographically smallest member, so the labelling is deterministic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterMap {
    clusters: BTreeMap<usize, BTreeSet<String>>,
}

impl ClusterMap {
    pub fn from_groups(groups: Vec<BTreeSet<String>>) -> Self {
        let mut sorted = groups;
        sorted.retain(|g| !g.is_empty());
        sorted.sort_by(|a, b| a.iter().next().cmp(&b.iter().next()));
        Self {
            clusters: sorted.into_iter().enumerate().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn clusters(&self) -> impl Iterator<Item = (usize, &BTreeSet<String>)> {
        self.clusters.iter().map(|(&id, members)| (id, members))
    }

    pub fn members(&self, cluster_id: usize) -> Option<&BTreeSet<String>> {
        self.clusters.get(&cluster_id)
    }

    pub fn cluster_of(&self, device_id: &str) -> Option<usize> {
        self.clusters
            .iter()
            .find(|(_, members)| members.contains(device_id))
            .map(|(&id, _)| id)
    }

    pub fn devices(&self) -> BTreeSet<String> {
        self.clusters.values().flatten().cloned().collect()
    }

    pub fn contains(&self, device_id: &str) -> bool {
        self.cluster_of(device_id).is_some()
    }

    /// Groups with the device added to the cluster at `cluster_id`
    /// (relabelled afterwards).
    fn with_device_in(&self, device_id: &str, cluster_id: usize) -> Self {
        let groups = self
            .clusters
            .iter()
            .map(|(&id, members)| {
                let mut g: BTreeSet<String> = members
                    .iter()
                    .filter(|m| m.as_str() != device_id)
                    .cloned()
                    .collect();
                if id == cluster_id {
                    g.insert(device_id.to_string());
                }
                g
            })
            .collect();
        Self::from_groups(groups)
    }

    pub fn without_device(&self, device_id: &str) -> Self {
        let groups = self
            .clusters
            .values()
            .map(|members| {
                members
                    .iter()
                    .filter(|m| m.as_str() != device_id)
                    .cloned()
                    .collect()
            })
            .collect();
        Self::from_groups(groups)
    }

    /// Structured text report, one `cluster=<id> devices=a,b,c` line each.
    pub fn to_report(&self) -> String {
        let mut out = String::new();
        for (id, members) in &self.clusters {
            let list: Vec<&str> = members.iter().map(|s| s.as_str()).collect();
            let _ = writeln!(out, "cluster={id} devices={}", list.join(","));
        }
        out
    }

    pub fn from_report(text: &str) -> Result<Self, ClusteringError> {
        let bad = |msg: &str| ClusteringError::Malformed(format!("cluster report: {msg}"));
        let mut groups = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let rest = line
                .strip_prefix("cluster=")
                .ok_or_else(|| bad("missing cluster="))?;
            let (_, devices) = rest
                .split_once(" devices=")
                .ok_or_else(|| bad("missing devices="))?;
            groups.push(devices.split(',').map(|s| s.to_string()).collect());
        }
        if groups.is_empty() {
            return Err(bad("empty"));
        }
        Ok(Self::from_groups(groups))
    }
}

/// Kruskal-style clustering: merge across the cheapest edges until `k`
/// clusters remain. Intra-cluster edges are skipped and discarded.
pub fn cluster_devices(graph: &SimilarityGraph, k: usize) -> Result<ClusterMap, ClusteringError> {
    let n = graph.len();
    if k == 0 || k > n {
        return Err(ClusteringError::KOutOfRange { k, n });
    }

    let mut edges = graph.edges();
    // Ascending weight, ties by lexicographic pair.
    edges.sort_by(|a, b| {
        a.2.partial_cmp(&b.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| (a.0, a.1).cmp(&(b.0, b.1)))
    });

    let index: BTreeMap<&str, usize> = graph
        .vertices()
        .iter()
        .enumerate()
        .map(|(i, v)| (v.as_str(), i))
        .collect();
    let mut uf = UnionFind::new(n);
    let mut remaining = n;
    for (a, b, _) in edges {
        if remaining == k {
            break;
        }
        if uf.union(index[a], index[b]) {
            remaining -= 1;
        }
    }

    let mut groups: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
    for (v, &i) in &index {
        groups.entry(uf.find(i)).or_default().insert((*v).to_string());
    }
    Ok(ClusterMap::from_groups(groups.into_values().collect()))
}

/// Disjoint-set forest with union by size and path compression.
struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (big, small) = if self.size[ra] >= self.size[rb] {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        true
    }
}

/// One transfer-learning step: fine-tune `target` starting from `source`'s
/// trained parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferStep {
    pub source: String,
    pub target: String,
    pub weight: f64,
}

/// MST transfer schedule for one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPlan {
    pub cluster_id: usize,
    pub root: String,
    pub steps: Vec<TransferStep>,
}

impl ClusterPlan {
    pub fn devices(&self) -> BTreeSet<String> {
        std::iter::once(self.root.clone())
            .chain(self.steps.iter().map(|s| s.target.clone()))
            .collect()
    }
}

/// Transfer schedules for every cluster, ordered by cluster id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingPlan {
    pub clusters: Vec<ClusterPlan>,
}

impl TrainingPlan {
    pub fn devices(&self) -> BTreeSet<String> {
        self.clusters.iter().flat_map(|c| c.devices()).collect()
    }

    pub fn to_report(&self) -> String {
        let mut out = String::new();
        for plan in &self.clusters {
            let _ = writeln!(out, "cluster={} root={}", plan.cluster_id, plan.root);
            for (i, step) in plan.steps.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "step={} source={} target={} weight={:.16e}",
                    i + 1,
                    step.source,
                    step.target,
                    step.weight
                );
            }
        }
        out
    }

    pub fn from_report(text: &str) -> Result<Self, ClusteringError> {
        let bad = |msg: &str| ClusteringError::Malformed(format!("plan report: {msg}"));
        let mut clusters: Vec<ClusterPlan> = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("cluster=") {
                let (id, root) = rest
                    .split_once(" root=")
                    .ok_or_else(|| bad("missing root="))?;
                clusters.push(ClusterPlan {
                    cluster_id: id.parse().map_err(|_| bad("bad cluster id"))?,
                    root: root.to_string(),
                    steps: Vec::new(),
                });
            } else if line.starts_with("step=") {
                let plan = clusters.last_mut().ok_or_else(|| bad("step before cluster"))?;
                let mut source = None;
                let mut target = None;
                let mut weight = None;
                for field in line.split_whitespace() {
                    let (key, value) = field.split_once('=').ok_or_else(|| bad("bad field"))?;
                    match key {
                        "step" => {}
                        "source" => source = Some(value.to_string()),
                        "target" => target = Some(value.to_string()),
                        "weight" => {
                            weight = Some(value.parse().map_err(|_| bad("bad weight"))?)
                        }
                        _ => return Err(bad("unknown key")),
                    }
                }
                plan.steps.push(TransferStep {
                    source: source.ok_or_else(|| bad("missing source"))?,
                    target: target.ok_or_else(|| bad("missing target"))?,
                    weight: weight.ok_or_else(|| bad("missing weight"))?,
                });
            } else {
                return Err(bad("unrecognized line"));
            }
        }
        Ok(Self { clusters })
    }
}

/// Build the transfer schedule for one cluster.
///
/// The root is the lexicographically smaller endpoint of the cluster's
/// cheapest internal edge. The tree then grows greedily: each step takes the
/// cheapest remaining edge with exactly one endpoint already visited and
/// emits `visited -> unvisited`. Either endpoint of an edge may serve as the
/// source. A singleton cluster has no steps.
pub fn plan_cluster_training(
    graph: &SimilarityGraph,
    cluster_id: usize,
    members: &BTreeSet<String>,
) -> Result<ClusterPlan, ClusteringError> {
    if members.is_empty() {
        return Err(ClusteringError::EmptyCluster);
    }
    for m in members {
        if !graph.vertices().contains(m) {
            return Err(ClusteringError::UnknownDevice(m.clone()));
        }
    }
    let members_vec: Vec<&String> = members.iter().collect();
    if members_vec.len() == 1 {
        return Ok(ClusterPlan {
            cluster_id,
            root: members_vec[0].clone(),
            steps: Vec::new(),
        });
    }

    // Cheapest internal edge determines the root.
    let mut best: Option<(f64, &String, &String)> = None;
    for (i, a) in members_vec.iter().enumerate() {
        for b in &members_vec[i + 1..] {
            let w = graph.weight(a, b)?;
            let candidate = (w, *a, *b);
            best = Some(match best {
                None => candidate,
                Some(current) => {
                    let cur_key = (current.0, current.1.as_str(), current.2.as_str());
                    let new_key = (candidate.0, candidate.1.as_str(), candidate.2.as_str());
                    if new_key.partial_cmp(&cur_key) == Some(std::cmp::Ordering::Less) {
                        candidate
                    } else {
                        current
                    }
                }
            });
        }
    }
    let (_, root, _) = best.expect("cluster has at least one edge");
    let root = root.clone();

    let mut visited: BTreeSet<&String> = BTreeSet::new();
    let mut pending: BTreeSet<&String> = members.iter().collect();
    let root_ref = members.get(&root).expect("root is a member");
    visited.insert(root_ref);
    pending.remove(root_ref);

    let mut steps = Vec::with_capacity(members.len() - 1);
    while !pending.is_empty() {
        let mut pick: Option<(f64, &String, &String)> = None;
        for &src in &visited {
            for &dst in &pending {
                let w = graph.weight(src, dst)?;
                let candidate = (w, src, dst);
                pick = Some(match pick {
                    None => candidate,
                    Some(current) => {
                        let cur_key = (current.0, current.1.as_str(), current.2.as_str());
                        let new_key = (candidate.0, candidate.1.as_str(), candidate.2.as_str());
                        if new_key.partial_cmp(&cur_key) == Some(std::cmp::Ordering::Less) {
                            candidate
                        } else {
                            current
                        }
                    }
                });
            }
        }
        let (w, src, dst) =
            pick.ok_or_else(|| ClusteringError::DisconnectedCluster(root.clone()))?;
        steps.push(TransferStep {
            source: src.clone(),
            target: dst.clone(),
            weight: w,
        });
        pending.remove(dst);
        visited.insert(dst);
    }

    Ok(ClusterPlan {
        cluster_id,
        root,
        steps,
    })
}

/// Schedules for every cluster of a map.
pub fn plan_training(
    graph: &SimilarityGraph,
    cluster_map: &ClusterMap,
) -> Result<TrainingPlan, ClusteringError> {
    let clusters = cluster_map
        .clusters()
        .map(|(id, members)| plan_cluster_training(graph, id, members))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TrainingPlan { clusters })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReassignOutcome {
    JoinedExisting,
    Moved,
    Unchanged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reassignment {
    pub cluster_map: ClusterMap,
    pub outcome: ReassignOutcome,
    /// The device's nearest neighbour, whose cluster it was assigned to.
    pub nearest: String,
}

/// Assign (or re-assign) a device to the cluster of its nearest neighbour
/// by edge weight. The graph must already contain the device's edges.
pub fn reassign_device(
    graph: &SimilarityGraph,
    cluster_map: &ClusterMap,
    device_id: &str,
) -> Result<Reassignment, ClusteringError> {
    let incident = graph
        .incident(device_id)
        .map_err(|_| ClusteringError::UnknownDevice(device_id.to_string()))?;
    let mut nearest: Option<(f64, &str)> = None;
    for (other, w) in incident {
        if !cluster_map.contains(other) {
            continue; // e.g. another device added in the same batch
        }
        nearest = Some(match nearest {
            None => (w, other),
            Some(cur) => {
                if (w, other) < cur {
                    (w, other)
                } else {
                    cur
                }
            }
        });
    }
    let (_, nearest) = nearest.ok_or_else(|| ClusteringError::EmptyCluster)?;
    let target = cluster_map
        .cluster_of(nearest)
        .ok_or_else(|| ClusteringError::UnknownDevice(nearest.to_string()))?;

    let previous = cluster_map.cluster_of(device_id);
    let outcome = match previous {
        None => ReassignOutcome::JoinedExisting,
        Some(prev) if prev == target => ReassignOutcome::Unchanged,
        Some(_) => ReassignOutcome::Moved,
    };
    let new_map = match outcome {
        ReassignOutcome::Unchanged => cluster_map.clone(),
        _ => cluster_map.with_device_in(device_id, target),
    };
    Ok(Reassignment {
        cluster_map: new_map,
        outcome,
        nearest: nearest.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(devices: &[&str], edges: &[(&str, &str, f64)]) -> SimilarityGraph {
        let mut g = SimilarityGraph::new(devices.iter().map(|s| s.to_string()).collect());
        for (a, b, w) in edges {
            g.set_weight(a, b, *w).unwrap();
        }
        g
    }

    fn four_device_graph() -> SimilarityGraph {
        graph(
            &["a", "b", "c", "d"],
            &[
                ("a", "b", 1.0),
                ("c", "d", 2.0),
                ("b", "c", 5.0),
                ("a", "c", 6.0),
                ("a", "d", 7.0),
                ("b", "d", 8.0),
            ],
        )
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        let g = four_device_graph();
        let map = cluster_devices(&g, 4).unwrap();
        assert_eq!(map.len(), 4);
        assert!(map.clusters().all(|(_, m)| m.len() == 1));
    }

    #[test]
    fn k_one_gives_single_cluster() {
        let g = four_device_graph();
        let map = cluster_devices(&g, 1).unwrap();
        assert_eq!(map.len(), 1);
        assert_eq!(map.members(0).unwrap().len(), 4);
    }

    #[test]
    fn textbook_two_cluster_case() {
        let g = four_device_graph();
        let map = cluster_devices(&g, 2).unwrap();
        let expect = |ids: &[&str]| ids.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        assert_eq!(map.members(0).unwrap(), &expect(&["a", "b"]));
        assert_eq!(map.members(1).unwrap(), &expect(&["c", "d"]));
    }

    #[test]
    fn k_out_of_range() {
        let g = four_device_graph();
        assert!(matches!(
            cluster_devices(&g, 0),
            Err(ClusteringError::KOutOfRange { .. })
        ));
        assert!(matches!(
            cluster_devices(&g, 5),
            Err(ClusteringError::KOutOfRange { .. })
        ));
    }

    #[test]
    fn refinement_across_k() {
        let g = four_device_graph();
        for k in 1..4 {
            let coarse = cluster_devices(&g, k).unwrap();
            let fine = cluster_devices(&g, k + 1).unwrap();
            for (_, fine_members) in fine.clusters() {
                let inside_some = coarse
                    .clusters()
                    .any(|(_, coarse_members)| fine_members.is_subset(coarse_members));
                assert!(inside_some, "k={k}: {fine_members:?} not nested");
            }
        }
    }

    #[test]
    fn plan_singleton() {
        let g = four_device_graph();
        let members: BTreeSet<String> = ["a".to_string()].into();
        let plan = plan_cluster_training(&g, 0, &members).unwrap();
        assert_eq!(plan.root, "a");
        assert!(plan.steps.is_empty());
    }

    #[test]
    fn plan_three_device_prim() {
        let g = graph(
            &["a", "b", "c"],
            &[("a", "b", 1.0), ("b", "c", 2.0), ("a", "c", 9.0)],
        );
        let members: BTreeSet<String> =
            ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let plan = plan_cluster_training(&g, 0, &members).unwrap();
        assert_eq!(plan.root, "a");
        assert_eq!(
            plan.steps,
            vec![
                TransferStep {
                    source: "a".into(),
                    target: "b".into(),
                    weight: 1.0
                },
                TransferStep {
                    source: "b".into(),
                    target: "c".into(),
                    weight: 2.0
                },
            ]
        );
        let total: f64 = plan.steps.iter().map(|s| s.weight).sum();
        assert_eq!(total, 3.0);
    }

    #[test]
    fn plan_prefixes_stay_connected() {
        let g = four_device_graph();
        let members = g.vertices().iter().cloned().collect::<BTreeSet<_>>();
        let plan = plan_cluster_training(&g, 0, &members).unwrap();
        let mut reachable: BTreeSet<&str> = [plan.root.as_str()].into();
        for step in &plan.steps {
            assert!(reachable.contains(step.source.as_str()));
            reachable.insert(step.target.as_str());
        }
        assert_eq!(reachable.len(), members.len());
    }

    #[test]
    fn reassign_identical_device_joins_twin() {
        let mut g = four_device_graph();
        let mut edges = BTreeMap::new();
        edges.insert("a".to_string(), 0.0); // identical to a
        edges.insert("b".to_string(), 1.0);
        edges.insert("c".to_string(), 6.0);
        edges.insert("d".to_string(), 7.0);
        g.add_vertex("e", &edges).unwrap();
        let map = cluster_devices(&four_device_graph(), 2).unwrap();
        let r = reassign_device(&g, &map, "e").unwrap();
        assert_eq!(r.outcome, ReassignOutcome::JoinedExisting);
        assert_eq!(r.nearest, "a");
        assert_eq!(r.cluster_map.cluster_of("e"), r.cluster_map.cluster_of("a"));
    }

    #[test]
    fn reassign_drifted_device_moves() {
        let mut g = four_device_graph();
        let map = cluster_devices(&g, 2).unwrap();
        // b drifts toward the {c, d} cluster.
        let mut updates = BTreeMap::new();
        updates.insert("a".to_string(), 9.0);
        updates.insert("c".to_string(), 0.5);
        updates.insert("d".to_string(), 0.6);
        g.update_vertex("b", &updates).unwrap();
        let r = reassign_device(&g, &map, "b").unwrap();
        assert_eq!(r.outcome, ReassignOutcome::Moved);
        assert_eq!(r.nearest, "c");
        assert_eq!(r.cluster_map.cluster_of("b"), r.cluster_map.cluster_of("c"));
    }

    #[test]
    fn reassign_unknown_device() {
        let g = four_device_graph();
        let map = cluster_devices(&g, 2).unwrap();
        assert!(matches!(
            reassign_device(&g, &map, "zz"),
            Err(ClusteringError::UnknownDevice(_))
        ));
    }

    #[test]
    fn removal_shrinks_only_its_cluster() {
        let g = four_device_graph();
        let map = cluster_devices(&g, 2).unwrap();
        let after = map.without_device("d");
        assert_eq!(after.cluster_of("c"), Some(1));
        assert_eq!(after.members(1).unwrap().len(), 1);
        assert_eq!(after.members(0).unwrap().len(), 2);
    }

    #[test]
    fn reports_roundtrip() {
        let g = four_device_graph();
        let map = cluster_devices(&g, 2).unwrap();
        assert_eq!(ClusterMap::from_report(&map.to_report()).unwrap(), map);
        let plan = plan_training(&g, &map).unwrap();
        assert_eq!(TrainingPlan::from_report(&plan.to_report()).unwrap(), plan);
    }

    #[test]
    fn determinism_under_tied_weights() {
        let g = graph(
            &["a", "b", "c", "d"],
            &[
                ("a", "b", 1.0),
                ("a", "c", 1.0),
                ("a", "d", 1.0),
                ("b", "c", 1.0),
                ("b", "d", 1.0),
                ("c", "d", 1.0),
            ],
        );
        let m1 = cluster_devices(&g, 2).unwrap();
        let m2 = cluster_devices(&g, 2).unwrap();
        assert_eq!(m1, m2);
        // Lexicographic tie-break: (a,b) merges first, then (a,c).
        let expect: BTreeSet<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(m1.members(0).unwrap(), &expect);
    }
}
