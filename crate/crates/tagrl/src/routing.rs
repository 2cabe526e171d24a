//! The dynamic routing MDP: flow arrival, hop-by-hop action semantics,
//! load and latency bookkeeping, per-step rewards and episode metrics,
//! plus a static shortest-path baseline.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::Error;
use crate::graph::{Edge, NodeId, PhysicalTopology, ShortestPathTable};
use crate::rng;
use crate::Result;

/// Per-flow demand is drawn uniformly from this range (demand-units).
pub const DEMAND_RANGE: (f64, f64) = (0.5, 1.5);

/// Per-hop shaping: base cost, overload penalty weight, terminal bonus.
const HOP_COST: f64 = 0.01;
const OVERLOAD_PENALTY: f64 = 0.05;
const TERMINAL_REWARD: f64 = 1.0;

/// Episode reward weights: throughput fraction, latency (per ms), and the
/// peak-utilization fraction.
const REWARD_THROUGHPUT_WEIGHT: f64 = 10.0;
const REWARD_LATENCY_WEIGHT: f64 = 0.05;
const REWARD_UTILIZATION_WEIGHT: f64 = 2.0;

/// Latency convention when an episode delivers nothing: `2 · ttl_max · 10 ms`.
pub fn undelivered_latency_penalty_ms(ttl_max: u32) -> f64 {
    2.0 * f64::from(ttl_max) * 10.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowRequest {
    pub src: NodeId,
    pub dst: NodeId,
    pub demand: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowEvent {
    Advanced,
    Delivered,
    Dropped,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub reward: f64,
    pub done_flow: bool,
    pub done_episode: bool,
    pub event: FlowEvent,
}

#[derive(Debug, Clone)]
pub struct ActiveFlow {
    pub flow: FlowRequest,
    pub current: NodeId,
    pub visited: Vec<bool>,
    /// Node sequence walked so far, starting at `src`.
    pub path: Vec<NodeId>,
    pub hops_used: u32,
    pub latency_ms: f64,
}

/// One routed flow's record, kept for metrics and virtual-edge usage
/// signals.
#[derive(Debug, Clone)]
pub struct FlowRecord {
    pub flow: FlowRequest,
    pub path: Vec<NodeId>,
    pub outcome: FlowEvent,
    pub latency_ms: f64,
}

/// Episode-scoped environment state. Loads reset on every episode.
#[derive(Debug, Clone)]
pub struct EnvState {
    pub loads: Vec<f64>,
    pub flow_queue: VecDeque<FlowRequest>,
    pub active: Option<ActiveFlow>,
    pub ttl_max: u32,
    pub offered_demand: f64,
    pub delivered_demand: f64,
    pub f_counts: Vec<u64>,
    pub records: Vec<FlowRecord>,
}

impl EnvState {
    /// Sample `flows_per_episode` flows: the (src, dst) pair uniform
    /// without replacement over unordered pairs, orientation uniform,
    /// demand uniform in [`DEMAND_RANGE`]. The first flow starts active.
    pub fn reset(
        topology: &PhysicalTopology,
        spd: &ShortestPathTable,
        seed: u64,
        flows_per_episode: usize,
    ) -> Result<EnvState> {
        if flows_per_episode == 0 {
            return Err(Error::InvalidParameter(
                "flows_per_episode must be at least 1".into(),
            ));
        }
        let n = topology.n();
        let num_pairs = n * (n - 1) / 2;
        if flows_per_episode > num_pairs {
            return Err(Error::InvalidParameter(format!(
                "{flows_per_episode} flows requested but only {num_pairs} node pairs exist"
            )));
        }
        let mut rand = rng::stream(seed, "flows", &[]);
        // Partial Fisher-Yates over pair indices gives sampling without
        // replacement.
        let mut pair_ids: Vec<usize> = (0..num_pairs).collect();
        let mut flows = Vec::with_capacity(flows_per_episode);
        for slot in 0..flows_per_episode {
            let pick = rand.random_range(slot..num_pairs);
            pair_ids.swap(slot, pick);
            let (a, b) = unrank_pair(pair_ids[slot], n);
            let (src, dst) = if rand.random_bool(0.5) { (a, b) } else { (b, a) };
            let demand = rand.random_range(DEMAND_RANGE.0..DEMAND_RANGE.1);
            flows.push(FlowRequest {
                src: NodeId(src),
                dst: NodeId(dst),
                demand,
            });
        }
        Ok(EnvState::with_flows(topology, spd, flows))
    }

    /// Environment over a fixed flow list (used by the baseline and tests).
    pub fn with_flows(
        topology: &PhysicalTopology,
        spd: &ShortestPathTable,
        flows: Vec<FlowRequest>,
    ) -> EnvState {
        let offered = flows.iter().map(|f| f.demand).sum();
        let mut state = EnvState {
            loads: vec![0.0; topology.num_edges()],
            flow_queue: flows.into(),
            active: None,
            ttl_max: 2 * spd.diameter(),
            offered_demand: offered,
            delivered_demand: 0.0,
            f_counts: vec![0; topology.num_edges()],
            records: Vec::new(),
        };
        state.activate_next(topology);
        state
    }

    fn activate_next(&mut self, topology: &PhysicalTopology) {
        self.active = self.flow_queue.pop_front().map(|flow| {
            let mut visited = vec![false; topology.n()];
            visited[flow.src.0] = true;
            ActiveFlow {
                current: flow.src,
                visited,
                path: vec![flow.src],
                hops_used: 0,
                latency_ms: 0.0,
                flow,
            }
        });
    }

    /// Physical neighbors of the current node not yet visited. Feasibility
    /// always consults the physical topology, never the logical graph.
    pub fn feasible_actions(&self, topology: &PhysicalTopology) -> Vec<NodeId> {
        match &self.active {
            Some(af) => topology
                .neighbors(af.current)
                .filter(|v| !af.visited[v.0])
                .collect(),
            None => Vec::new(),
        }
    }

    /// Advance the active flow one hop. Congestion terms use the load the
    /// link carried before this flow joined it: a hop onto a link at
    /// exactly its capacity sees latency multiplier 3 and no overload
    /// penalty yet.
    pub fn step(&mut self, topology: &PhysicalTopology, action: NodeId) -> Result<StepOutcome> {
        let af = self.active.as_mut().ok_or(Error::InvalidParameter(
            "step called with no active flow".into(),
        ))?;
        let edge = if af.current == action {
            return Err(Error::InfeasibleAction {
                node: af.current.0,
                action: action.0,
            });
        } else {
            Edge::new(af.current, action)
        };
        let link = topology.edge_idx(edge).ok_or(Error::InfeasibleAction {
            node: af.current.0,
            action: action.0,
        })?;
        if af.visited[action.0] {
            return Err(Error::InfeasibleAction {
                node: af.current.0,
                action: action.0,
            });
        }

        let attrs = topology.attrs(link);
        let ratio = self.loads[link] / attrs.capacity;
        let mut reward = -HOP_COST - OVERLOAD_PENALTY * (ratio - 1.0).max(0.0);
        let latency = attrs.base_latency_ms * (1.0 + 2.0 * ratio.min(2.0));

        self.loads[link] += af.flow.demand;
        self.f_counts[link] += 1;
        af.latency_ms += latency;
        af.current = action;
        af.visited[action.0] = true;
        af.path.push(action);
        af.hops_used += 1;

        let event = if action == af.flow.dst {
            reward += TERMINAL_REWARD;
            FlowEvent::Delivered
        } else {
            let stuck = topology
                .neighbors(action)
                .all(|v| af.visited[v.0]);
            if af.hops_used >= self.ttl_max || stuck {
                reward -= TERMINAL_REWARD;
                FlowEvent::Dropped
            } else {
                FlowEvent::Advanced
            }
        };

        let done_flow = event != FlowEvent::Advanced;
        if done_flow {
            let af = self.active.take().expect("active flow");
            if event == FlowEvent::Delivered {
                self.delivered_demand += af.flow.demand;
            }
            self.records.push(FlowRecord {
                flow: af.flow,
                path: af.path,
                outcome: event,
                latency_ms: af.latency_ms,
            });
            self.activate_next(topology);
        }

        Ok(StepOutcome {
            reward,
            done_flow,
            done_episode: self.active.is_none(),
            event,
        })
    }

    pub fn metrics(&self, topology: &PhysicalTopology) -> EpisodeMetrics {
        let delivered: Vec<&FlowRecord> = self
            .records
            .iter()
            .filter(|r| r.outcome == FlowEvent::Delivered)
            .collect();
        let avg_latency_ms = if delivered.is_empty() {
            undelivered_latency_penalty_ms(self.ttl_max)
        } else {
            delivered.iter().map(|r| r.latency_ms).sum::<f64>() / delivered.len() as f64
        };
        let max_util_fraction = self
            .loads
            .iter()
            .enumerate()
            .map(|(i, &load)| load / topology.attrs(i).capacity)
            .fold(0.0, f64::max);
        let reward = episode_reward(
            self.delivered_demand,
            self.offered_demand,
            avg_latency_ms,
            max_util_fraction,
        );
        EpisodeMetrics {
            avg_throughput: self.delivered_demand,
            offered_demand: self.offered_demand,
            avg_latency_ms,
            max_link_utilization_pct: max_util_fraction * 100.0,
            reward,
            f: self.f_counts.clone(),
        }
    }
}

fn unrank_pair(mut rank: usize, n: usize) -> (usize, usize) {
    // Pairs (i, j), i < j, in lexicographic order.
    for i in 0..n {
        let row = n - 1 - i;
        if rank < row {
            return (i, i + 1 + rank);
        }
        rank -= row;
    }
    unreachable!("pair rank out of range");
}

/// End-of-episode summary; `reward` is the scalar fed back to the graph
/// update mechanism and logged per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    /// Delivered demand-units this episode.
    pub avg_throughput: f64,
    pub offered_demand: f64,
    pub avg_latency_ms: f64,
    pub max_link_utilization_pct: f64,
    pub reward: f64,
    /// Per physical link traversal counts.
    pub f: Vec<u64>,
}

/// `10 · delivered/offered − 0.05 · avg_latency_ms − 2 · max_util_fraction`
pub fn episode_reward(
    delivered_demand: f64,
    offered_demand: f64,
    avg_latency_ms: f64,
    max_util_fraction: f64,
) -> f64 {
    REWARD_THROUGHPUT_WEIGHT * (delivered_demand / offered_demand)
        - REWARD_LATENCY_WEIGHT * avg_latency_ms
        - REWARD_UTILIZATION_WEIGHT * max_util_fraction
}

/// Route every flow along its static minimum base-latency path with the
/// same per-hop bookkeeping as [`EnvState::step`].
pub fn shortest_path_baseline(
    topology: &PhysicalTopology,
    spd: &ShortestPathTable,
    flows: Vec<FlowRequest>,
) -> Result<EpisodeMetrics> {
    shortest_path_baseline_detailed(topology, spd, flows).map(|(metrics, _)| metrics)
}

/// As [`shortest_path_baseline`], also returning the per-flow records.
pub fn shortest_path_baseline_detailed(
    topology: &PhysicalTopology,
    spd: &ShortestPathTable,
    flows: Vec<FlowRequest>,
) -> Result<(EpisodeMetrics, Vec<FlowRecord>)> {
    let mut state = EnvState::with_flows(topology, spd, flows);
    while let Some(af) = &state.active {
        let (_, prev) = topology.min_latency_paths(af.flow.src);
        let mut path = vec![af.flow.dst];
        let mut cursor = af.flow.dst;
        while let Some(p) = prev[cursor.0] {
            path.push(p);
            cursor = p;
        }
        path.reverse();
        debug_assert_eq!(path.first(), Some(&af.flow.src));
        for hop in path.into_iter().skip(1) {
            let outcome = state.step(topology, hop)?;
            if outcome.done_flow {
                break;
            }
        }
    }
    let metrics = state.metrics(topology);
    Ok((metrics, state.records))
}
