//! Policy-gradient training: REINFORCE with an entropy bonus and an
//! exponential-moving-average baseline, Adam with stepwise learning-rate
//! decay, rollout collection, the per-epoch graph-update hook, exact-resume
//! checkpoints, and a finite-difference gradient oracle.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::graph::{Edge, LogicalGraph, PhysicalTopology, ShortestPathTable};
use crate::linalg::Mat;
use crate::pagu::{sample_probes, GraphUpdater, UpdateConfig, UpdateOutcome, UpdateRecord};
use crate::policy::{
    decision_backward, evaluate_decision, DecisionContext, GraphView, ParamGrads, PolicyConfig,
    PolicyParams,
};
use crate::routing::{EnvState, EpisodeMetrics, DEMAND_RANGE};
use crate::rng;
use crate::sase::compute_raw_features;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub entropy_coef: f64,
    pub gamma: f64,
    pub batch: usize,
    pub epochs: usize,
    pub flows_per_episode: usize,
    pub baseline_decay: f64,
    /// Fraction of the previous episode's link loads carried into the next
    /// episode (0 = fully episodic congestion).
    pub load_carryover: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 5e-5,
            lr_decay_factor: 0.5,
            lr_decay_every: 200,
            entropy_coef: 0.01,
            gamma: 0.95,
            batch: 32,
            epochs: 1000,
            flows_per_episode: 32,
            baseline_decay: 0.99,
            load_carryover: 0.0,
        }
    }
}

impl TrainConfig {
    /// `lr · factor^⌊epoch / every⌋`
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// `G_t = r_t + γ · G_{t+1}`, with `G = 0` past the last step.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut returns = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (slot, &r) in returns.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *slot = acc;
    }
    returns
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub current_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> AdamState {
        AdamState {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            current_lr: lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn apply(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        self.current_lr = lr;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Exponential moving average of episode returns, used as the advantage
/// baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaBaseline {
    pub value: f64,
    pub decay: f64,
}

impl EmaBaseline {
    pub fn new(decay: f64) -> EmaBaseline {
        EmaBaseline { value: 0.0, decay }
    }

    pub fn update(&mut self, batch_mean_return: f64) {
        self.value = self.decay * self.value + (1.0 - self.decay) * batch_mean_return;
    }
}

/// One decision along a rollout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajStep {
    pub ctx: DecisionContext,
    pub action_index: usize,
    pub log_prob: f64,
    pub reward: f64,
}

/// One episode's decisions plus its summary metrics.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<TrajStep>,
    pub metrics: EpisodeMetrics,
    /// Node sequences walked per flow, for virtual-edge usage accounting.
    pub flow_paths: Vec<Vec<crate::graph::NodeId>>,
}

/// Surrogate loss over a frozen batch:
/// `−(1/B) Σ log π(a|s) · (G − b) − entropy_coef · H̄ + weight_decay · ‖θ‖²`,
/// along with its exact gradient. The same routine backs both the training
/// update and the finite-difference oracle.
pub fn batch_loss_and_grad(
    batch: &[Trajectory],
    params: &PolicyParams,
    policy_config: &PolicyConfig,
    positional: Option<&Mat>,
    config: &TrainConfig,
    baseline: f64,
) -> (f64, ParamGrads) {
    let batch_size = batch.len() as f64;
    let total_steps: usize = batch.iter().map(|t| t.steps.len()).sum();
    let mut grads = ParamGrads::zeros_like(params);
    let mut loss = 0.0;

    for traj in batch {
        let rewards: Vec<f64> = traj.steps.iter().map(|s| s.reward).collect();
        let returns = discounted_returns(&rewards, config.gamma);
        for (step, g_t) in traj.steps.iter().zip(returns) {
            let trace = evaluate_decision(params, policy_config, positional, &step.ctx);
            let advantage = g_t - baseline;
            let chosen = step.action_index;
            loss -= trace.log_probs[chosen] * advantage / batch_size;

            let entropy: f64 = trace
                .probs
                .iter()
                .zip(&trace.log_probs)
                .map(|(&p, &lp)| if p > 0.0 { -p * lp } else { 0.0 })
                .sum();
            loss -= config.entropy_coef * entropy / total_steps as f64;

            // dL/dscore_u combines the REINFORCE term
            //   −(adv/B) (1{u=a} − π_u)
            // and the entropy bonus term
            //   (coef/N) π_u (log π_u + H).
            let g_scores: Vec<f64> = trace
                .probs
                .iter()
                .zip(&trace.log_probs)
                .enumerate()
                .map(|(u, (&p, &lp))| {
                    let indicator = f64::from(u == chosen);
                    let pg = -(advantage / batch_size) * (indicator - p);
                    let ent = config.entropy_coef / total_steps as f64 * p * (lp + entropy);
                    pg + ent
                })
                .collect();
            decision_backward(&trace, &step.ctx, policy_config, params, &g_scores, &mut grads);
        }
    }

    loss += config.weight_decay * params.squared_norm();
    (loss, grads)
}

/// Summary of one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct UpdateStats {
    pub loss: f64,
    pub mean_return: f64,
    pub lr: f64,
}

/// One REINFORCE/Adam step over a rollout batch. Aborts (without touching
/// the parameters) if the loss or any gradient is non-finite.
#[allow(clippy::too_many_arguments)]
pub fn policy_gradient_update(
    batch: &[Trajectory],
    params: &mut PolicyParams,
    opt: &mut AdamState,
    baseline: &mut EmaBaseline,
    policy_config: &PolicyConfig,
    positional: Option<&Mat>,
    config: &TrainConfig,
    lr: f64,
) -> Result<UpdateStats> {
    let (loss, grads) = batch_loss_and_grad(
        batch,
        params,
        policy_config,
        positional,
        config,
        baseline.value,
    );
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss at optimizer step {}", opt.step)));
    }
    let mut flat_g = grads.flatten();
    let flat_p = params.flatten();
    for (g, &p) in flat_g.iter_mut().zip(&flat_p) {
        *g += 2.0 * config.weight_decay * p;
    }
    if flat_g.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient at optimizer step {}",
            opt.step
        )));
    }
    let mut flat = flat_p;
    opt.apply(&mut flat, &flat_g, lr);
    params.load_flat(&flat);

    let mean_return = batch
        .iter()
        .map(|t| {
            let rewards: Vec<f64> = t.steps.iter().map(|s| s.reward).collect();
            discounted_returns(&rewards, config.gamma)
                .first()
                .copied()
                .unwrap_or(0.0)
        })
        .sum::<f64>()
        / batch.len() as f64;
    baseline.update(mean_return);

    Ok(UpdateStats {
        loss,
        mean_return,
        lr,
    })
}

/// Per-epoch training log row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub seed: u64,
    pub avg_throughput: f64,
    pub avg_latency_ms: f64,
    pub max_link_utilization_pct: f64,
    pub reward: f64,
    pub delta: f64,
    pub edge_count: usize,
    pub lr: f64,
}

/// Exact-resume snapshot of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub topology_name: String,
    pub seed: u64,
    pub epoch: usize,
    pub policy_config: PolicyConfig,
    pub train_config: TrainConfig,
    pub params: PolicyParams,
    pub opt: AdamState,
    pub baseline: EmaBaseline,
    pub logical: LogicalGraph,
    pub updater: Option<GraphUpdater>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).expect("checkpoint serialization");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

/// Drives rollouts, updates, and the graph-update cycle over a fixed
/// physical topology.
pub struct Trainer<'t> {
    pub topology: &'t PhysicalTopology,
    pub spd: ShortestPathTable,
    pub positional: Option<Mat>,
    pub policy_config: PolicyConfig,
    pub train_config: TrainConfig,
    pub params: PolicyParams,
    pub opt: AdamState,
    pub baseline: EmaBaseline,
    pub logical: LogicalGraph,
    view: GraphView,
    pub updater: Option<GraphUpdater>,
    pub seed: u64,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub update_log: Vec<UpdateRecord>,
    /// Final link loads of the last rollout, for cross-episode carryover.
    last_loads: std::cell::RefCell<Option<Vec<f64>>>,
}

impl<'t> Trainer<'t> {
    pub fn new(
        topology: &'t PhysicalTopology,
        seed: u64,
        policy_config: PolicyConfig,
        train_config: TrainConfig,
        update_config: Option<UpdateConfig>,
    ) -> Result<Trainer<'t>> {
        let spd = crate::graph::shortest_path_distances(topology)?;
        let positional = if policy_config.encoder.structure_aware {
            Some(
                crate::sase::positional_embeddings(topology, &spd, policy_config.encoder.k)?.p,
            )
        } else {
            None
        };
        let params = PolicyParams::init(seed, &policy_config);
        let opt = AdamState::new(params.num_params(), train_config.lr);
        let baseline = EmaBaseline::new(train_config.baseline_decay);
        let logical = LogicalGraph::from_physical(topology);
        let view = GraphView::new(&logical);
        let updater = update_config.map(|cfg| GraphUpdater::new(topology, cfg));
        Ok(Trainer {
            topology,
            spd,
            positional,
            policy_config,
            train_config,
            params,
            opt,
            baseline,
            logical,
            view,
            updater,
            seed,
            epoch: 0,
            history: Vec::new(),
            update_log: Vec::new(),
            last_loads: std::cell::RefCell::new(None),
        })
    }

    /// Restore a trainer mid-run; the history before the checkpoint epoch
    /// is not replayed.
    pub fn resume(topology: &'t PhysicalTopology, checkpoint: Checkpoint) -> Result<Trainer<'t>> {
        if checkpoint.topology_name != topology.name() {
            return Err(Error::InvalidParameter(format!(
                "checkpoint was trained on topology '{}', got '{}'",
                checkpoint.topology_name,
                topology.name()
            )));
        }
        let spd = crate::graph::shortest_path_distances(topology)?;
        let positional = if checkpoint.policy_config.encoder.structure_aware {
            Some(
                crate::sase::positional_embeddings(
                    topology,
                    &spd,
                    checkpoint.policy_config.encoder.k,
                )?
                .p,
            )
        } else {
            None
        };
        let view = GraphView::new(&checkpoint.logical);
        Ok(Trainer {
            topology,
            spd,
            positional,
            policy_config: checkpoint.policy_config,
            train_config: checkpoint.train_config,
            params: checkpoint.params,
            opt: checkpoint.opt,
            baseline: checkpoint.baseline,
            logical: checkpoint.logical,
            view,
            updater: checkpoint.updater,
            seed: checkpoint.seed,
            epoch: checkpoint.epoch,
            history: Vec::new(),
            update_log: Vec::new(),
            last_loads: std::cell::RefCell::new(None),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            topology_name: self.topology.name().to_string(),
            seed: self.seed,
            epoch: self.epoch,
            policy_config: self.policy_config,
            train_config: self.train_config,
            params: self.params.clone(),
            opt: self.opt.clone(),
            baseline: self.baseline,
            logical: self.logical.clone(),
            updater: self.updater.clone(),
        }
    }

    /// Roll out one episode under the current policy and logical graph.
    pub fn rollout(&self, episode_seed: u64, action_seed: u64) -> Result<Trajectory> {
        self.rollout_with_loads(episode_seed, action_seed, None)
    }

    fn rollout_with_loads(
        &self,
        episode_seed: u64,
        action_seed: u64,
        initial_loads: Option<&[f64]>,
    ) -> Result<Trajectory> {
        let mut env = EnvState::reset(
            self.topology,
            &self.spd,
            episode_seed,
            self.train_config.flows_per_episode,
        )?;
        if let Some(loads) = initial_loads {
            env.loads.copy_from_slice(loads);
        }
        let mut action_rng = rng::stream(action_seed, "actions", &[]);
        let mut steps = Vec::new();
        while let Some(af) = &env.active {
            let feasible = env.feasible_actions(self.topology);
            debug_assert!(!feasible.is_empty(), "env must drop stuck flows");
            let ctx = DecisionContext {
                x_raw: compute_raw_features(&env, self.topology),
                ahat: self.view.ahat.clone(),
                neighbors: self.view.neighbors.clone(),
                current: af.current,
                feasible,
                ttl_fraction: f64::from(env.ttl_max - af.hops_used)
                    / f64::from(env.ttl_max.max(1)),
                demand_norm: af.flow.demand / DEMAND_RANGE.1,
            };
            let trace =
                evaluate_decision(&self.params, &self.policy_config, self.positional.as_ref(), &ctx);
            let draw: f64 = action_rng.random_range(0.0..1.0);
            let mut cumulative = 0.0;
            let mut action_index = trace.probs.len() - 1;
            for (i, &p) in trace.probs.iter().enumerate() {
                cumulative += p;
                if draw < cumulative {
                    action_index = i;
                    break;
                }
            }
            let action = ctx.feasible[action_index];
            let outcome = env.step(self.topology, action)?;
            steps.push(TrajStep {
                ctx,
                action_index,
                log_prob: trace.log_probs[action_index],
                reward: outcome.reward,
            });
            if outcome.done_episode {
                break;
            }
        }
        let metrics = env.metrics(self.topology);
        let flow_paths = env.records.iter().map(|r| r.path.clone()).collect();
        self.last_loads.replace(Some(env.loads));
        Ok(Trajectory {
            steps,
            metrics,
            flow_paths,
        })
    }

    /// One epoch: `batch` rollouts, a policy-gradient step, then the graph
    /// update check.
    pub fn run_epoch(&mut self) -> Result<()> {
        let epoch = self.epoch;
        let lr = self.train_config.lr_at(epoch);
        let carryover = self.train_config.load_carryover;
        let mut carried: Option<Vec<f64>> = None;
        let mut batch = Vec::with_capacity(self.train_config.batch);
        for episode in 0..self.train_config.batch {
            let episode_seed = rng::derive_seed(self.seed, "episode", &[epoch as u64, episode as u64]);
            let action_seed = rng::derive_seed(self.seed, "policy", &[epoch as u64, episode as u64]);
            let traj = self.rollout_with_loads(episode_seed, action_seed, carried.as_deref())?;
            if carryover > 0.0 {
                carried = self.last_loads.borrow().as_ref().map(|loads| {
                    loads.iter().map(|&l| l * carryover).collect()
                });
            }
            if let Some(updater) = &mut self.updater {
                let usage = GraphUpdater::episode_usage(
                    self.topology,
                    &self.logical,
                    &traj.metrics.f,
                    traj.flow_paths.iter().cloned(),
                );
                updater.record_episode(usage, traj.metrics.reward);
            }
            batch.push(traj);
        }

        policy_gradient_update(
            &batch,
            &mut self.params,
            &mut self.opt,
            &mut self.baseline,
            &self.policy_config,
            self.positional.as_ref(),
            &self.train_config,
            lr,
        )?;

        let mut delta = 0.0;
        if self.updater.is_some() {
            delta = self.graph_update_check(epoch, &batch);
        }

        let n = batch.len() as f64;
        self.history.push(EpochRecord {
            epoch,
            seed: self.seed,
            avg_throughput: batch.iter().map(|t| t.metrics.avg_throughput).sum::<f64>() / n,
            avg_latency_ms: batch.iter().map(|t| t.metrics.avg_latency_ms).sum::<f64>() / n,
            max_link_utilization_pct: batch
                .iter()
                .map(|t| t.metrics.max_link_utilization_pct)
                .sum::<f64>()
                / n,
            reward: batch.iter().map(|t| t.metrics.reward).sum::<f64>() / n,
            delta,
            edge_count: self.logical.num_edges(),
            lr,
        });
        self.epoch += 1;
        Ok(())
    }

    fn graph_update_check(&mut self, epoch: usize, batch: &[Trajectory]) -> f64 {
        let probe_pool: Vec<DecisionContext> = batch
            .iter()
            .flat_map(|t| t.steps.iter().map(|s| s.ctx.clone()))
            .collect();
        let probes = sample_probes(probe_pool, self.seed, epoch);
        // Structural encodings for candidate relevance: the idle-network
        // feature matrix under the current logical graph and parameters.
        let idle = EnvState::with_flows(self.topology, &self.spd, Vec::new());
        let x_idle = compute_raw_features(&idle, self.topology);
        let z = crate::sase::encode_states_traced(
            &x_idle,
            &self.view.ahat,
            self.positional.as_ref(),
            &self.params.encoder,
        )
        .z;
        let updater = self.updater.as_mut().expect("updater");
        let outcome = updater.maybe_update(
            epoch,
            &self.params,
            &self.policy_config,
            self.positional.as_ref(),
            self.topology,
            &self.spd,
            &self.logical,
            &z,
            probes,
        );
        match outcome {
            UpdateOutcome::SnapshotInstalled => 0.0,
            UpdateOutcome::BelowThreshold { delta } => delta,
            UpdateOutcome::Updated {
                delta,
                record,
                logical,
            } => {
                self.logical = logical;
                self.view = GraphView::new(&self.logical);
                self.update_log.push(record);
                delta
            }
        }
    }

    /// Run until `train_config.epochs`, returning the per-epoch history.
    pub fn train(&mut self) -> Result<&[EpochRecord]> {
        while self.epoch < self.train_config.epochs {
            self.run_epoch()?;
        }
        Ok(&self.history)
    }
}

/// Report from the gradient oracle.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Central-difference check of `analytic_grad` against `loss` on a seeded
/// coordinate subsample. Relative error per coordinate is
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn finite_difference_check(
    params: &PolicyParams,
    loss: &dyn Fn(&PolicyParams) -> f64,
    analytic_grad: &[f64],
    epsilon: f64,
    sample_size: usize,
    seed: u64,
) -> FdReport {
    let coords = sample_coordinates(analytic_grad.len(), sample_size, seed);
    let flat = params.flatten();
    let mut worst: f64 = 0.0;
    let mut scratch = params.clone();
    for &i in &coords {
        let mut up = flat.clone();
        up[i] += epsilon;
        scratch.load_flat(&up);
        let lu = loss(&scratch);
        let mut down = flat.clone();
        down[i] -= epsilon;
        scratch.load_flat(&down);
        let ld = loss(&scratch);
        let numeric = (lu - ld) / (2.0 * epsilon);
        let rel = (analytic_grad[i] - numeric).abs()
            / (analytic_grad[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    FdReport {
        max_rel_error: worst,
        coords_checked: coords.len(),
    }
}

/// Seeded distinct coordinate subsample (partial Fisher-Yates).
pub fn sample_coordinates(total: usize, sample_size: usize, seed: u64) -> Vec<usize> {
    let size = sample_size.min(total);
    let mut ids: Vec<usize> = (0..total).collect();
    let mut rand = rng::stream(seed, "fd-coords", &[]);
    for slot in 0..size {
        let pick = rand.random_range(slot..total);
        ids.swap(slot, pick);
    }
    ids.truncate(size);
    ids
}

/// Everything the gradient check needs: a frozen rollout batch and the
/// matching loss closure inputs.
pub struct GradCheckInstance {
    pub topology: PhysicalTopology,
    pub policy_config: PolicyConfig,
    pub train_config: TrainConfig,
    pub params: PolicyParams,
    pub positional: Option<Mat>,
    pub batch: Vec<Trajectory>,
    pub baseline: f64,
}

/// Build the standard oracle instance: a 6-node topology, two flows per
/// episode, a 4-episode frozen batch rolled out under the initial policy.
pub fn grad_check_instance(seed: u64) -> Result<GradCheckInstance> {
    let gen_cfg = crate::graph::GeneratorConfig::for_size(6, 2);
    let topology = crate::graph::generate_geant_like(seed, &gen_cfg)?;
    let policy_config = PolicyConfig {
        encoder: crate::sase::EncoderConfig {
            k: 6,
            ..Default::default()
        },
    };
    let train_config = TrainConfig {
        batch: 4,
        flows_per_episode: 2,
        ..Default::default()
    };
    let trainer = Trainer::new(&topology, seed, policy_config, train_config, None)?;
    let mut batch = Vec::new();
    for episode in 0..train_config.batch {
        let e_seed = rng::derive_seed(seed, "episode", &[0, episode as u64]);
        let a_seed = rng::derive_seed(seed, "policy", &[0, episode as u64]);
        batch.push(trainer.rollout(e_seed, a_seed)?);
    }
    Ok(GradCheckInstance {
        policy_config,
        train_config,
        params: trainer.params.clone(),
        positional: trainer.positional.clone(),
        batch,
        baseline: 0.25,
        topology,
    })
}

/// Run the oracle on the standard instance; `corrupt` multiplies the
/// largest sampled analytic-gradient coordinate (the canary).
pub fn run_grad_check(seed: u64, sample_size: usize, corrupt: Option<f64>) -> Result<FdReport> {
    let inst = grad_check_instance(seed)?;
    let loss = |p: &PolicyParams| {
        batch_loss_and_grad(
            &inst.batch,
            p,
            &inst.policy_config,
            inst.positional.as_ref(),
            &inst.train_config,
            inst.baseline,
        )
        .0 + inst.train_config.weight_decay * 0.0
    };
    let (_, grads) = batch_loss_and_grad(
        &inst.batch,
        &inst.params,
        &inst.policy_config,
        inst.positional.as_ref(),
        &inst.train_config,
        inst.baseline,
    );
    let mut flat_g = grads.flatten();
    let flat_p = inst.params.flatten();
    for (g, &p) in flat_g.iter_mut().zip(&flat_p) {
        *g += 2.0 * inst.train_config.weight_decay * p;
    }
    if let Some(factor) = corrupt {
        let coords = sample_coordinates(flat_g.len(), sample_size, seed);
        let target = coords
            .iter()
            .copied()
            .max_by(|&a, &b| flat_g[a].abs().partial_cmp(&flat_g[b].abs()).unwrap())
            .expect("sampled coordinates");
        flat_g[target] *= factor;
    }
    Ok(finite_difference_check(
        &inst.params,
        &loss,
        &flat_g,
        1e-5,
        sample_size,
        seed,
    ))
}

/// Usage map helper re-exported for the harness.
pub fn episode_usage_map(
    topology: &PhysicalTopology,
    logical: &LogicalGraph,
    traj: &Trajectory,
) -> BTreeMap<Edge, f64> {
    GraphUpdater::episode_usage(
        topology,
        logical,
        &traj.metrics.f,
        traj.flow_paths.iter().cloned(),
    )
}
