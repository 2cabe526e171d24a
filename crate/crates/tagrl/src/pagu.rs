//! Policy-adaptive graph update: watches how much the policy's action
//! distributions have shifted since the last snapshot, scores logical
//! edges by reward-weighted usage, rewires the edge set (retaining
//! important edges, introducing high-affinity candidates), clamps the
//! edge count to a band around the initial size, and rebuilds adjacency.
//!
//! Only the encoder's message-passing graph is rewired; routing
//! feasibility always follows the physical topology. Candidate edges may
//! therefore be virtual shortcuts between two-hop physical neighbors.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::graph::{Edge, LogicalGraph, NodeId, PhysicalTopology, ShortestPathTable};
use crate::linalg::{self, Mat};
use crate::policy::{evaluate_decision, DecisionContext, PolicyConfig, PolicyParams};

/// Floor applied to the shifted episode reward so usage in the worst
/// episode of the window still counts.
const REWARD_SHIFT_EPS: f64 = 1e-6;

/// Number of cached decision contexts used for deviation checks.
pub const PROBE_COUNT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateConfig {
    /// Deviation level that triggers a graph update.
    pub deviation_threshold: f64,
    /// Retention cut as a fraction of the maximum edge importance.
    pub tau_retain: f64,
    /// Minimum relevance score for introducing a candidate edge.
    pub gamma_add: f64,
    /// Episodes of importance history.
    pub window: usize,
    /// Allowed edge-count band as fractions of the initial count.
    pub guardrail: (f64, f64),
}

impl Default for UpdateConfig {
    fn default() -> Self {
        UpdateConfig {
            deviation_threshold: 0.1,
            tau_retain: 0.6,
            gamma_add: 0.4,
            window: 10,
            guardrail: (0.9, 1.1),
        }
    }
}

impl UpdateConfig {
    pub fn edge_floor(&self, initial_edges: usize) -> usize {
        (self.guardrail.0 * initial_edges as f64 - 1e-9).ceil() as usize
    }

    pub fn edge_ceiling(&self, initial_edges: usize) -> usize {
        (self.guardrail.1 * initial_edges as f64 + 1e-9).floor() as usize
    }
}

/// The previous epoch's policy behavior: probe contexts plus that policy's
/// action distributions on them. Deviation compares the current policy
/// against this, so it measures the behavior change between consecutive
/// epochs, not cumulative drift. The probe set itself is refreshed only
/// after a graph update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub params: PolicyParams,
    pub probes: Vec<DecisionContext>,
    probe_probs: Vec<Vec<f64>>,
}

impl PolicySnapshot {
    pub fn new(
        params: PolicyParams,
        config: &PolicyConfig,
        positional: Option<&Mat>,
        probes: Vec<DecisionContext>,
    ) -> PolicySnapshot {
        let probe_probs = probes
            .iter()
            .map(|ctx| evaluate_decision(&params, config, positional, ctx).probs)
            .collect();
        PolicySnapshot {
            params,
            probes,
            probe_probs,
        }
    }

}

/// Half the L1 distance between two distributions over the same support.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Mean total-variation distance between the current policy and the
/// snapshot policy, both evaluated on the snapshot's probe contexts with
/// the same feasibility masks. Symmetric, zero for identical parameters,
/// and bounded by 1.
pub fn policy_deviation(
    current: &PolicyParams,
    snapshot: &PolicySnapshot,
    config: &PolicyConfig,
    positional: Option<&Mat>,
) -> f64 {
    assert!(!snapshot.probes.is_empty(), "deviation needs probe states");
    let mut acc = 0.0;
    for (ctx, snap_probs) in snapshot.probes.iter().zip(&snapshot.probe_probs) {
        let probs = evaluate_decision(current, config, positional, ctx).probs;
        acc += total_variation(&probs, snap_probs);
    }
    acc / snapshot.probes.len() as f64
}

/// Windowed per-edge accumulation of traversal-frequency × shifted reward.
/// Episode usage is kept as sorted pair lists so the ledger serializes
/// cleanly into checkpoints.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ImportanceLedger {
    window: VecDeque<(Vec<(Edge, f64)>, f64)>,
    capacity: usize,
}

impl ImportanceLedger {
    pub fn new(capacity: usize) -> ImportanceLedger {
        ImportanceLedger {
            window: VecDeque::new(),
            capacity,
        }
    }

    pub fn record_episode(&mut self, f_map: BTreeMap<Edge, f64>, reward: f64) {
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back((f_map.into_iter().collect(), reward));
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    /// Normalized importance over `edges`: per edge, the window sum of
    /// `f · max(reward − window_min, ε)`, divided by the total mass.
    /// All-zero mass degenerates to the uniform distribution.
    pub fn edge_importance(&self, edges: &BTreeSet<Edge>) -> BTreeMap<Edge, f64> {
        assert!(!self.window.is_empty(), "importance needs history");
        let r_min = self
            .window
            .iter()
            .map(|(_, r)| *r)
            .fold(f64::INFINITY, f64::min);
        let mut raw: BTreeMap<Edge, f64> = edges.iter().map(|e| (*e, 0.0)).collect();
        for (f_map, reward) in &self.window {
            let shifted = (reward - r_min).max(REWARD_SHIFT_EPS);
            for (edge, f) in f_map {
                if let Some(slot) = raw.get_mut(edge) {
                    *slot += f * shifted;
                }
            }
        }
        let total: f64 = raw.values().sum();
        if total <= 0.0 {
            let uniform = 1.0 / edges.len() as f64;
            for v in raw.values_mut() {
                *v = uniform;
            }
        } else {
            for v in raw.values_mut() {
                *v /= total;
            }
        }
        raw
    }
}

/// Rescaled cosine affinity of encoded states: 1 for aligned rows, 0 for
/// opposed, ½ for orthogonal (or degenerate zero rows).
pub fn relevance_score(z: &Mat, edge: Edge) -> f64 {
    let a = z.row(edge.0 .0);
    let b = z.row(edge.1 .0);
    let na = linalg::norm2(a);
    let nb = linalg::norm2(b);
    if na == 0.0 || nb == 0.0 {
        return 0.5;
    }
    (1.0 + linalg::dot(a, b) / (na * nb)) / 2.0
}

/// Relevance scores for every candidate edge.
pub fn score_candidates(z: &Mat, candidates: &BTreeSet<Edge>) -> BTreeMap<Edge, f64> {
    candidates
        .iter()
        .map(|&e| (e, relevance_score(z, e)))
        .collect()
}

/// Candidate edges for introduction: physical edges currently absent from
/// the logical graph, plus virtual pairs at physical distance two, the
/// latter capped at `3 · initial_edges` by descending affinity.
pub fn candidate_edges(
    topology: &PhysicalTopology,
    spd: &ShortestPathTable,
    logical: &LogicalGraph,
    z: &Mat,
    initial_edges: usize,
) -> BTreeSet<Edge> {
    let mut candidates: BTreeSet<Edge> = topology
        .links()
        .iter()
        .map(|(e, _)| *e)
        .filter(|e| !logical.contains(*e))
        .collect();
    let mut virtual_pairs: Vec<(Edge, f64)> = Vec::new();
    let n = topology.n();
    for i in 0..n {
        for j in i + 1..n {
            let edge = Edge::new(NodeId(i), NodeId(j));
            if spd.dist(NodeId(i), NodeId(j)) == 2 && !logical.contains(edge) {
                virtual_pairs.push((edge, relevance_score(z, edge)));
            }
        }
    }
    virtual_pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    candidates.extend(
        virtual_pairs
            .into_iter()
            .take(3 * initial_edges)
            .map(|(e, _)| e),
    );
    candidates
}

/// Propose the next edge set: keep edges whose importance clears
/// `tau_retain · max_w` (backbone edges are always kept so message passing
/// stays connected on physical links), then admit candidates with
/// relevance at or above `gamma_add`, best first. Additions are capped by
/// the guardrail headroom left above the *current* edge count, which keeps
/// the per-update churn proportional to the band width rather than to the
/// number of pruned edges.
pub fn update_edge_set(
    current: &BTreeSet<Edge>,
    importance: &BTreeMap<Edge, f64>,
    candidate_scores: &BTreeMap<Edge, f64>,
    backbone: &BTreeSet<Edge>,
    initial_edges: usize,
    config: &UpdateConfig,
) -> BTreeSet<Edge> {
    let max_w = importance.values().copied().fold(0.0, f64::max);
    let cut = config.tau_retain * max_w;
    let mut next: BTreeSet<Edge> = current
        .iter()
        .filter(|e| backbone.contains(e) || importance.get(e).copied().unwrap_or(0.0) >= cut)
        .copied()
        .collect();

    let ceiling = config.edge_ceiling(initial_edges);
    let headroom = ceiling.saturating_sub(current.len());
    let mut ranked: Vec<(Edge, f64)> = candidate_scores
        .iter()
        .filter(|(e, &phi)| !next.contains(e) && phi >= config.gamma_add)
        .map(|(&e, &phi)| (e, phi))
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    next.extend(ranked.into_iter().take(headroom).map(|(e, _)| e));
    next
}

/// Clamp the proposal into the guardrail band: refill from the removed
/// edges in descending importance, or shed added edges in ascending
/// relevance; ties broken by the canonical edge order.
pub fn enforce_guardrail(
    proposed: &BTreeSet<Edge>,
    previous: &BTreeSet<Edge>,
    importance: &BTreeMap<Edge, f64>,
    candidate_scores: &BTreeMap<Edge, f64>,
    initial_edges: usize,
    config: &UpdateConfig,
) -> BTreeSet<Edge> {
    let floor = config.edge_floor(initial_edges);
    let ceiling = config.edge_ceiling(initial_edges);
    let mut result = proposed.clone();

    if result.len() < floor {
        let mut removed: Vec<(Edge, f64)> = previous
            .difference(proposed)
            .map(|&e| (e, importance.get(&e).copied().unwrap_or(0.0)))
            .collect();
        removed.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for (edge, _) in removed {
            if result.len() >= floor {
                break;
            }
            result.insert(edge);
        }
    }

    if result.len() > ceiling {
        let mut added: Vec<(Edge, f64)> = result
            .difference(previous)
            .map(|&e| (e, candidate_scores.get(&e).copied().unwrap_or(0.0)))
            .collect();
        added.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        for (edge, _) in added {
            if result.len() <= ceiling {
                break;
            }
            result.remove(&edge);
        }
    }
    result
}

/// Binary adjacency from an edge set.
pub fn rebuild_adjacency(edges: &BTreeSet<Edge>, n: usize) -> Mat {
    let mut a = Mat::zeros(n, n);
    for e in edges {
        a[(e.0 .0, e.1 .0)] = 1.0;
        a[(e.1 .0, e.0 .0)] = 1.0;
    }
    a
}

/// One applied update, for the JSONL audit log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UpdateRecord {
    pub epoch: usize,
    pub delta: f64,
    pub removed: Vec<Edge>,
    pub added: Vec<Edge>,
    pub edge_count: usize,
}

/// Spanning backbone of the physical edges present in the logical graph,
/// maximizing current importance (Kruskal over descending weight, ties by
/// edge order). These edges are exempt from removal so message passing
/// stays connected along the currently loaded skeleton.
pub fn importance_backbone(
    topology: &PhysicalTopology,
    logical: &LogicalGraph,
    importance: &BTreeMap<Edge, f64>,
) -> BTreeSet<Edge> {
    let mut present: Vec<Edge> = logical
        .edges()
        .iter()
        .filter(|e| topology.has_edge(**e))
        .copied()
        .collect();
    present.sort_by(|a, b| {
        let wa = importance.get(a).copied().unwrap_or(0.0);
        let wb = importance.get(b).copied().unwrap_or(0.0);
        wb.partial_cmp(&wa).unwrap().then(a.cmp(b))
    });
    let n = topology.n();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut tree = BTreeSet::new();
    for edge in present {
        let (ra, rb) = (find(&mut parent, edge.0 .0), find(&mut parent, edge.1 .0));
        if ra != rb {
            parent[ra] = rb;
            tree.insert(edge);
        }
    }
    tree
}

/// Drives the update cycle across epochs: accumulates episode usage,
/// checks deviation against the last snapshot, and rewires when the
/// policy has moved enough.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphUpdater {
    pub config: UpdateConfig,
    pub ledger: ImportanceLedger,
    pub snapshot: Option<PolicySnapshot>,
    initial_edges: usize,
}

/// Outcome of one post-epoch check.
#[derive(Debug, Clone)]
pub enum UpdateOutcome {
    /// First epoch: snapshot installed, no deviation measured yet.
    SnapshotInstalled,
    /// Deviation below threshold; graph untouched.
    BelowThreshold { delta: f64 },
    /// Graph rewired.
    Updated {
        delta: f64,
        record: UpdateRecord,
        logical: LogicalGraph,
    },
}

impl GraphUpdater {
    pub fn new(topology: &PhysicalTopology, config: UpdateConfig) -> GraphUpdater {
        GraphUpdater {
            ledger: ImportanceLedger::new(config.window),
            config,
            snapshot: None,
            initial_edges: topology.num_edges(),
        }
    }

    pub fn record_episode(&mut self, f_map: BTreeMap<Edge, f64>, reward: f64) {
        self.ledger.record_episode(f_map, reward);
    }

    /// Per-episode usage map: traversal counts on physical links plus, for
    /// each virtual logical edge, whether both endpoints lay on a single
    /// routed path this episode.
    pub fn episode_usage(
        topology: &PhysicalTopology,
        logical: &LogicalGraph,
        f_counts: &[u64],
        paths: impl Iterator<Item = Vec<NodeId>> + Clone,
    ) -> BTreeMap<Edge, f64> {
        let mut f_map: BTreeMap<Edge, f64> = topology
            .links()
            .iter()
            .enumerate()
            .filter(|(idx, _)| f_counts[*idx] > 0)
            .map(|(idx, (e, _))| (*e, f_counts[idx] as f64))
            .collect();
        for edge in logical.edges() {
            if topology.has_edge(*edge) {
                continue;
            }
            let co_routed = paths
                .clone()
                .any(|path| path.contains(&edge.0) && path.contains(&edge.1));
            if co_routed {
                f_map.insert(*edge, 1.0);
            }
        }
        f_map
    }

    /// Run the deviation check and, when triggered, the full rewire. The
    /// caller supplies the structural encodings `z` (for candidate
    /// relevance) and the probe pool for the next snapshot.
    #[allow(clippy::too_many_arguments)]
    pub fn maybe_update(
        &mut self,
        epoch: usize,
        params: &PolicyParams,
        policy_config: &PolicyConfig,
        positional: Option<&Mat>,
        topology: &PhysicalTopology,
        spd: &ShortestPathTable,
        logical: &LogicalGraph,
        z: &Mat,
        probe_pool: Vec<DecisionContext>,
    ) -> UpdateOutcome {
        let Some(snapshot) = &self.snapshot else {
            self.snapshot = Some(PolicySnapshot::new(
                params.clone(),
                policy_config,
                positional,
                probe_pool,
            ));
            return UpdateOutcome::SnapshotInstalled;
        };
        let delta = policy_deviation(params, snapshot, policy_config, positional);
        if delta < self.config.deviation_threshold || self.ledger.is_empty() {
            return UpdateOutcome::BelowThreshold { delta };
        }

        let current = logical.edges();
        let importance = self.ledger.edge_importance(current);
        let backbone = importance_backbone(topology, logical, &importance);
        let candidates = candidate_edges(topology, spd, logical, z, self.initial_edges);
        let scores = score_candidates(z, &candidates);
        let proposed = update_edge_set(
            current,
            &importance,
            &scores,
            &backbone,
            self.initial_edges,
            &self.config,
        );
        let next = enforce_guardrail(
            &proposed,
            current,
            &importance,
            &scores,
            self.initial_edges,
            &self.config,
        );

        let removed: Vec<Edge> = current.difference(&next).copied().collect();
        let added: Vec<Edge> = next.difference(current).copied().collect();
        let record = UpdateRecord {
            epoch,
            delta,
            removed,
            added,
            edge_count: next.len(),
        };
        let logical = LogicalGraph::new(topology.n(), next).expect("valid edge set");
        self.snapshot = Some(PolicySnapshot::new(
            params.clone(),
            policy_config,
            positional,
            probe_pool,
        ));
        UpdateOutcome::Updated {
            delta,
            record,
            logical,
        }
    }
}

/// Reservoir-style deterministic probe sampling: keeps the pool if small,
/// otherwise picks `PROBE_COUNT` distinct contexts.
pub fn sample_probes(
    mut pool: Vec<DecisionContext>,
    seed: u64,
    epoch: usize,
) -> Vec<DecisionContext> {
    if pool.len() <= PROBE_COUNT {
        return pool;
    }
    use rand::Rng;
    let mut rand = crate::rng::stream(seed, "probes", &[epoch as u64]);
    for slot in 0..PROBE_COUNT {
        let pick = rand.random_range(slot..pool.len());
        pool.swap(slot, pick);
    }
    pool.truncate(PROBE_COUNT);
    pool
}
