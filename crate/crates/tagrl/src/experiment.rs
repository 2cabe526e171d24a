//! Experiment harness: presets, ablation variants, sensitivity sweeps,
//! deterministic CSV/JSONL emission, and run manifests. Every command
//! resolves its configuration up front, writes it to `manifest.json`, and
//! produces byte-identical outputs for identical (config, seed) pairs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::graph::{
    generate_geant_like, load_topology, save_topology, GeneratorConfig, PhysicalTopology,
};
use crate::pagu::{UpdateConfig, UpdateRecord};
use crate::policy::PolicyConfig;
use crate::rng;
use crate::sase::EncoderConfig;
use crate::trainer::{EpochRecord, TrainConfig, Trainer};
use crate::Result;

/// Scale presets: `desk` finishes a run in roughly a minute; `paper`
/// mirrors the full-scale hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn generator(&self) -> GeneratorConfig {
        match self {
            // A stretched four-cluster instance (diameter ~8 at the default
            // topology seed): long routes keep navigation hard enough that
            // encoder quality and graph adaptation show up in the reward.
            Preset::Desk => GeneratorConfig {
                n: 12,
                clusters: 4,
                p_intra: 0.55,
                p_inter: 0.04,
                min_edges: 13,
                capacity_range: (4.0, 10.0),
                latency_range_ms: (1.0, 10.0),
            },
            Preset::Paper => GeneratorConfig::default(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig {
                batch: 8,
                epochs: 300,
                flows_per_episode: 8,
                ..Default::default()
            },
            Preset::Paper => TrainConfig::default(),
        }
    }

    /// Positional width is capped by the node count (12 at desk scale).
    pub fn encoder_config(&self, structure_aware: bool) -> EncoderConfig {
        let k = match self {
            Preset::Desk => 12,
            Preset::Paper => 16,
        };
        EncoderConfig {
            k,
            structure_aware,
            ..Default::default()
        }
    }
}

/// Ablation variants: which of the two mechanisms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Plain GCN states, mean aggregation, frozen graph.
    Baseline,
    /// Structure-aware encoder, frozen graph.
    Sase,
    /// Plain encoder, adaptive graph updates.
    Pagu,
    /// Both mechanisms.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Sase, Variant::Pagu, Variant::Full];

    pub fn structure_aware(&self) -> bool {
        matches!(self, Variant::Sase | Variant::Full)
    }

    pub fn graph_updates(&self) -> bool {
        matches!(self, Variant::Pagu | Variant::Full)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Sase => "sase",
            Variant::Pagu => "pagu",
            Variant::Full => "full",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "sase" => Ok(Variant::Sase),
            "pagu" => Ok(Variant::Pagu),
            "full" => Ok(Variant::Full),
            other => Err(Error::InvalidParameter(format!("unknown variant '{other}'"))),
        }
    }
}

/// Sweep grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub gamma_values: Vec<f64>,
    pub retention_ratios: Vec<f64>,
    pub feature_dims: Vec<usize>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            gamma_values: vec![0.90, 0.93, 0.95, 0.96, 0.99],
            retention_ratios: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            feature_dims: vec![16, 32, 64, 128, 256],
        }
    }
}

/// On-disk experiment configuration; unknown keys are rejected. Every
/// field is optional and falls back to the preset defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub preset: Option<Preset>,
    pub variant: Option<String>,
    pub seeds: Option<Vec<u64>>,
    pub output_dir: Option<String>,
    pub topology_path: Option<String>,
    pub topology_seed: Option<u64>,
    pub nodes: Option<usize>,
    pub clusters: Option<usize>,
    pub p_intra: Option<f64>,
    pub p_inter: Option<f64>,
    pub min_edges: Option<usize>,
    pub capacity_range: Option<(f64, f64)>,
    pub latency_range_ms: Option<(f64, f64)>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub lr_decay_factor: Option<f64>,
    pub lr_decay_every: Option<usize>,
    pub entropy_coef: Option<f64>,
    pub gamma: Option<f64>,
    pub batch: Option<usize>,
    pub epochs: Option<usize>,
    pub flows_per_episode: Option<usize>,
    pub baseline_decay: Option<f64>,
    pub load_carryover: Option<f64>,
    pub feature_dim: Option<usize>,
    pub positional_dim: Option<usize>,
    pub deviation_threshold: Option<f64>,
    pub tau_retain: Option<f64>,
    pub gamma_add: Option<f64>,
    pub importance_window: Option<usize>,
    pub gamma_sweep: Option<Vec<f64>>,
    pub retention_ratios: Option<Vec<f64>>,
    pub feature_dims: Option<Vec<usize>>,
}

impl ExperimentFile {
    pub fn load(path: &Path) -> Result<ExperimentFile> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

/// Fully resolved run plan, written verbatim to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub mode: String,
    pub preset: Preset,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub topology_source: TopologySource,
    pub train: TrainConfig,
    pub encoder_d: usize,
    pub encoder_k: usize,
    pub update: UpdateConfig,
    pub sweep: SweepSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TopologySource {
    File { path: String },
    Generated { seed: u64, generator: GeneratorConfig },
}

/// Default topology seed when none is given.
pub const DEFAULT_TOPOLOGY_SEED: u64 = 9;

impl ResolvedConfig {
    /// Merge preset defaults with file overrides.
    pub fn resolve(mode: &str, file: &ExperimentFile) -> Result<ResolvedConfig> {
        let preset = file.preset.unwrap_or(Preset::Desk);
        let variant: Variant = file
            .variant
            .as_deref()
            .map_or(Ok(Variant::Full), str::parse)?;
        let mut train = preset.train_config();
        if let Some(v) = file.lr {
            train.lr = v;
        }
        if let Some(v) = file.weight_decay {
            train.weight_decay = v;
        }
        if let Some(v) = file.lr_decay_factor {
            train.lr_decay_factor = v;
        }
        if let Some(v) = file.lr_decay_every {
            train.lr_decay_every = v;
        }
        if let Some(v) = file.entropy_coef {
            train.entropy_coef = v;
        }
        if let Some(v) = file.gamma {
            train.gamma = v;
        }
        if let Some(v) = file.batch {
            train.batch = v;
        }
        if let Some(v) = file.epochs {
            train.epochs = v;
        }
        if let Some(v) = file.flows_per_episode {
            train.flows_per_episode = v;
        }
        if let Some(v) = file.baseline_decay {
            train.baseline_decay = v;
        }
        if let Some(v) = file.load_carryover {
            train.load_carryover = v;
        }
        validate_train(&train)?;

        let mut gen = preset.generator();
        if let (Some(n), Some(clusters)) = (file.nodes, file.clusters) {
            gen = GeneratorConfig::for_size(n, clusters);
        } else if let Some(n) = file.nodes {
            gen = GeneratorConfig::for_size(n, gen.clusters.min(n));
        } else if let Some(clusters) = file.clusters {
            gen.clusters = clusters;
        }
        if let Some(v) = file.p_intra {
            gen.p_intra = v;
        }
        if let Some(v) = file.p_inter {
            gen.p_inter = v;
        }
        if let Some(v) = file.min_edges {
            gen.min_edges = v;
        }
        if let Some(v) = file.capacity_range {
            gen.capacity_range = v;
        }
        if let Some(v) = file.latency_range_ms {
            gen.latency_range_ms = v;
        }
        let topology_source = match &file.topology_path {
            Some(path) => TopologySource::File { path: path.clone() },
            None => TopologySource::Generated {
                seed: file.topology_seed.unwrap_or(DEFAULT_TOPOLOGY_SEED),
                generator: gen,
            },
        };

        let enc = preset.encoder_config(true);
        let mut update = UpdateConfig::default();
        if let Some(v) = file.deviation_threshold {
            update.deviation_threshold = v;
        }
        if let Some(v) = file.tau_retain {
            update.tau_retain = v;
        }
        if let Some(v) = file.gamma_add {
            update.gamma_add = v;
        }
        if let Some(v) = file.importance_window {
            update.window = v;
        }

        let mut sweep = SweepSpec::default();
        if let Some(v) = &file.gamma_sweep {
            sweep.gamma_values = v.clone();
        }
        if let Some(v) = &file.retention_ratios {
            sweep.retention_ratios = v.clone();
        }
        if let Some(v) = &file.feature_dims {
            sweep.feature_dims = v.clone();
        }

        Ok(ResolvedConfig {
            mode: mode.to_string(),
            preset,
            variant,
            seeds: file.seeds.clone().unwrap_or_else(|| vec![1, 2, 3]),
            topology_source,
            train,
            encoder_d: file.feature_dim.unwrap_or(enc.d),
            encoder_k: file.positional_dim.unwrap_or(enc.k),
            update,
            sweep,
        })
    }

    pub fn load_or_generate_topology(&self) -> Result<PhysicalTopology> {
        match &self.topology_source {
            TopologySource::File { path } => load_topology(Path::new(path)),
            TopologySource::Generated { seed, generator } => {
                generate_geant_like(*seed, generator)
            }
        }
    }

    pub fn policy_config(&self, variant: Variant, topology_n: usize) -> PolicyConfig {
        PolicyConfig {
            encoder: EncoderConfig {
                d: self.encoder_d,
                k: self.encoder_k.min(topology_n),
                structure_aware: variant.structure_aware(),
                ..EncoderConfig::default()
            },
        }
    }
}

fn validate_train(train: &TrainConfig) -> Result<()> {
    if !(0.0..1.0).contains(&train.gamma) {
        return Err(Error::InvalidParameter(format!(
            "gamma must lie in [0, 1), got {}",
            train.gamma
        )));
    }
    if train.lr <= 0.0 || train.batch == 0 || train.flows_per_episode == 0 {
        return Err(Error::InvalidParameter(
            "learning rate, batch, and flows_per_episode must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&train.load_carryover) {
        return Err(Error::InvalidParameter(format!(
            "load_carryover must lie in [0, 1), got {}",
            train.load_carryover
        )));
    }
    Ok(())
}

/// Outputs of one training run.
pub struct RunArtifacts {
    pub history: Vec<EpochRecord>,
    pub update_log: Vec<UpdateRecord>,
    pub checkpoint: crate::trainer::Checkpoint,
}

/// Train one (variant, seed) pair on `topology`.
pub fn run_training(
    config: &ResolvedConfig,
    topology: &PhysicalTopology,
    variant: Variant,
    seed: u64,
) -> Result<RunArtifacts> {
    let policy_config = config.policy_config(variant, topology.n());
    let update = variant.graph_updates().then_some(config.update);
    let mut trainer = Trainer::new(topology, seed, policy_config, config.train, update)?;
    trainer.train()?;
    Ok(RunArtifacts {
        history: trainer.history.clone(),
        update_log: trainer.update_log.clone(),
        checkpoint: trainer.checkpoint(),
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Mean reward (and friends) over the final window of a run.
pub const FINAL_WINDOW: usize = 100;

pub fn final_window(history: &[EpochRecord]) -> &[EpochRecord] {
    let start = history.len().saturating_sub(FINAL_WINDOW);
    &history[start..]
}

pub fn final_window_mean_reward(history: &[EpochRecord]) -> f64 {
    let window = final_window(history);
    window.iter().map(|r| r.reward).sum::<f64>() / window.len().max(1) as f64
}

/// One ablation summary row.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub throughput_mean: f64,
    pub throughput_std: f64,
    pub latency_mean: f64,
    pub latency_std: f64,
    pub max_util_mean: f64,
    pub max_util_std: f64,
}

pub fn ablation_row(variant: Variant, seed: u64, history: &[EpochRecord]) -> AblationRow {
    let window = final_window(history);
    let col = |f: fn(&EpochRecord) -> f64| -> (f64, f64) {
        let values: Vec<f64> = window.iter().map(f).collect();
        mean_std(&values)
    };
    let (reward_mean, reward_std) = col(|r| r.reward);
    let (throughput_mean, throughput_std) = col(|r| r.avg_throughput);
    let (latency_mean, latency_std) = col(|r| r.avg_latency_ms);
    let (max_util_mean, max_util_std) = col(|r| r.max_link_utilization_pct);
    AblationRow {
        variant,
        seed,
        reward_mean,
        reward_std,
        throughput_mean,
        throughput_std,
        latency_mean,
        latency_std,
        max_util_mean,
        max_util_std,
    }
}

/// Remove a seeded random `(1 − ratio)` fraction of edges while always
/// keeping a seeded random spanning tree, so every sparsified topology
/// stays connected. `ratio = 1.0` returns the topology unchanged.
pub fn sparsify_topology(
    topology: &PhysicalTopology,
    ratio: f64,
    seed: u64,
) -> Result<PhysicalTopology> {
    if !(0.0 < ratio && ratio <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "retention ratio must lie in (0, 1], got {ratio}"
        )));
    }
    let total = topology.num_edges();
    let keep = ((ratio * total as f64).round() as usize).max(topology.n() - 1);
    if keep >= total {
        return Ok(topology.clone());
    }
    let mut order: Vec<usize> = (0..total).collect();
    let mut rand = rng::stream(seed, "sparsify", &[]);
    for i in (1..order.len()).rev() {
        let j = rand.random_range(0..=i);
        order.swap(i, j);
    }
    // Randomized Kruskal: the shuffled prefix forms a uniform-ish tree.
    let mut parent: Vec<usize> = (0..topology.n()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let links = topology.links();
    let mut chosen: BTreeSet<usize> = BTreeSet::new();
    for &idx in &order {
        let (edge, _) = links[idx];
        let (ra, rb) = (find(&mut parent, edge.0 .0), find(&mut parent, edge.1 .0));
        if ra != rb {
            parent[ra] = rb;
            chosen.insert(idx);
        }
    }
    for &idx in &order {
        if chosen.len() >= keep {
            break;
        }
        chosen.insert(idx);
    }
    let edges = chosen
        .iter()
        .map(|&idx| {
            let (e, attrs) = links[idx];
            (e.0 .0, e.1 .0, attrs)
        })
        .collect();
    PhysicalTopology::new(
        topology.n(),
        &format!("{}-r{:.2}", topology.name(), ratio),
        edges,
    )
}

// ---------------------------------------------------------------------------
// Deterministic file emission
// ---------------------------------------------------------------------------

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

pub const TRAIN_LOG_HEADER: &str =
    "epoch,seed,avg_throughput,avg_latency_ms,max_link_utilization_pct,reward,delta,edge_count,lr";

pub fn train_log_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.seed,
            fmt6(r.avg_throughput),
            fmt6(r.avg_latency_ms),
            fmt6(r.max_link_utilization_pct),
            fmt6(r.reward),
            fmt6(r.delta),
            r.edge_count,
            fmt6(r.lr)
        );
    }
    out
}

pub fn update_log_jsonl(records: &[UpdateRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("update record"));
        out.push('\n');
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "variant,seed,reward_mean,reward_std,throughput_mean,throughput_std,\
         latency_mean,latency_std,max_util_mean,max_util_std",
    );
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.variant.name(),
            r.seed,
            fmt6(r.reward_mean),
            fmt6(r.reward_std),
            fmt6(r.throughput_mean),
            fmt6(r.throughput_std),
            fmt6(r.latency_mean),
            fmt6(r.latency_std),
            fmt6(r.max_util_mean),
            fmt6(r.max_util_std)
        );
    }
    out
}

/// Plot-ready series: one point per sweep value with the per-seed samples
/// and their dispersion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSeries {
    pub sweep: String,
    pub points: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub mean_reward: f64,
    pub stdev_reward: f64,
    pub per_seed: Vec<SeedSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSample {
    pub seed: u64,
    pub reward: f64,
}

/// Aggregate raw (value, seed, reward) samples into a plot series.
pub fn emit_plot_data(sweep: &str, samples: &[(f64, u64, f64)]) -> SweepSeries {
    let mut values: Vec<f64> = samples.iter().map(|(v, _, _)| *v).collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    let points = values
        .into_iter()
        .map(|value| {
            let per_seed: Vec<SeedSample> = samples
                .iter()
                .filter(|(v, _, _)| *v == value)
                .map(|&(_, seed, reward)| SeedSample { seed, reward })
                .collect();
            let rewards: Vec<f64> = per_seed.iter().map(|s| s.reward).collect();
            let (mean_reward, stdev_reward) = mean_std(&rewards);
            SweepPoint {
                value,
                mean_reward,
                stdev_reward,
                per_seed,
            }
        })
        .collect();
    SweepSeries {
        sweep: sweep.to_string(),
        points,
    }
}

pub fn sweep_csv(series: &SweepSeries) -> String {
    let mut out = String::from("value,seed,reward\n");
    for point in &series.points {
        for s in &point.per_seed {
            let _ = writeln!(out, "{},{},{}", fmt6(point.value), s.seed, fmt6(s.reward));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Command drivers (write everything under an output directory)
// ---------------------------------------------------------------------------

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_manifest(dir: &Path, config: &ResolvedConfig) -> Result<()> {
    let json = serde_json::to_string_pretty(config).expect("manifest");
    write_file(&dir.join("manifest.json"), &(json + "\n"))
}

fn write_run_outputs(dir: &Path, artifacts: &RunArtifacts) -> Result<()> {
    write_file(&dir.join("train_log.csv"), &train_log_csv(&artifacts.history))?;
    write_file(
        &dir.join("update_log.jsonl"),
        &update_log_jsonl(&artifacts.update_log),
    )?;
    artifacts.checkpoint.save(&dir.join("checkpoint.json"))
}

/// `train`: one variant, one seed.
pub fn cmd_train(config: &ResolvedConfig, seed: u64, out_dir: &Path) -> Result<RunArtifacts> {
    let topology = config.load_or_generate_topology()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_manifest(out_dir, config)?;
    save_topology(&topology, &out_dir.join("topology.json"))?;
    let artifacts = run_training(config, &topology, config.variant, seed)?;
    write_run_outputs(out_dir, &artifacts)?;
    Ok(artifacts)
}

/// `eval`: replay a checkpointed policy on fresh episodes next to the
/// shortest-path baseline.
pub fn cmd_eval(
    checkpoint_path: &Path,
    topology_path: &Path,
    episodes: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<String> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = serde_json::json!({
        "mode": "eval",
        "checkpoint": checkpoint_path.display().to_string(),
        "topology": topology_path.display().to_string(),
        "episodes": episodes,
        "seed": seed,
    });
    write_file(
        &out_dir.join("manifest.json"),
        &(serde_json::to_string_pretty(&manifest).expect("manifest") + "\n"),
    )?;
    let topology = load_topology(topology_path)?;
    let checkpoint = crate::trainer::Checkpoint::load(checkpoint_path)?;
    let trainer = Trainer::resume(&topology, checkpoint)?;
    let spd = crate::graph::shortest_path_distances(&topology)?;
    let mut out = String::from(
        "episode,source,avg_throughput,avg_latency_ms,max_link_utilization_pct,reward\n",
    );
    for episode in 0..episodes {
        let e_seed = rng::derive_seed(seed, "eval-episode", &[episode as u64]);
        let a_seed = rng::derive_seed(seed, "eval-policy", &[episode as u64]);
        let traj = trainer.rollout(e_seed, a_seed)?;
        let m = &traj.metrics;
        let _ = writeln!(
            out,
            "{},policy,{},{},{},{}",
            episode,
            fmt6(m.avg_throughput),
            fmt6(m.avg_latency_ms),
            fmt6(m.max_link_utilization_pct),
            fmt6(m.reward)
        );
        let env = crate::routing::EnvState::reset(
            &topology,
            &spd,
            e_seed,
            trainer.train_config.flows_per_episode,
        )?;
        let mut flows: Vec<crate::routing::FlowRequest> =
            env.active.iter().map(|af| af.flow).collect();
        flows.extend(env.flow_queue.iter().copied());
        let b = crate::routing::shortest_path_baseline(&topology, &spd, flows)?;
        let _ = writeln!(
            out,
            "{},baseline,{},{},{},{}",
            episode,
            fmt6(b.avg_throughput),
            fmt6(b.avg_latency_ms),
            fmt6(b.max_link_utilization_pct),
            fmt6(b.reward)
        );
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_file(&out_dir.join("eval.csv"), &out)?;
    Ok(out)
}

/// `ablate`: all four variants across the seed list, shared topology.
pub fn cmd_ablate(config: &ResolvedConfig, out_dir: &Path) -> Result<Vec<AblationRow>> {
    let topology = config.load_or_generate_topology()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_manifest(out_dir, config)?;
    save_topology(&topology, &out_dir.join("topology.json"))?;
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        for &seed in &config.seeds {
            let artifacts = run_training(config, &topology, variant, seed)?;
            let run_dir = out_dir.join(format!("runs/{}_s{}", variant.name(), seed));
            write_run_outputs(&run_dir, &artifacts)?;
            rows.push(ablation_row(variant, seed, &artifacts.history));
        }
    }
    write_file(&out_dir.join("ablation.csv"), &ablation_csv(&rows))?;
    Ok(rows)
}

/// Shared sweep driver: one full-variant run per (value, seed).
fn run_sweep(
    name: &str,
    values: &[f64],
    config: &ResolvedConfig,
    out_dir: &Path,
    mut run_one: impl FnMut(f64, u64) -> Result<Vec<EpochRecord>>,
) -> Result<SweepSeries> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_manifest(out_dir, config)?;
    let mut samples = Vec::new();
    for &value in values {
        for &seed in &config.seeds {
            let history = run_one(value, seed)?;
            let dir = out_dir.join(format!("runs/{name}_{value}_s{seed}"));
            write_file(&dir.join("train_log.csv"), &train_log_csv(&history))?;
            samples.push((value, seed, final_window_mean_reward(&history)));
        }
    }
    let series = emit_plot_data(name, &samples);
    write_file(&out_dir.join(format!("sweep_{name}.csv")), &sweep_csv(&series))?;
    write_file(
        &out_dir.join(format!("sweep_{name}.json")),
        &(serde_json::to_string_pretty(&series).expect("series") + "\n"),
    )?;
    Ok(series)
}

/// `sweep-gamma`: discount factor grid, all else fixed.
pub fn cmd_sweep_gamma(config: &ResolvedConfig, out_dir: &Path) -> Result<SweepSeries> {
    let topology = config.load_or_generate_topology()?;
    save_topology(&topology, &{
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        out_dir.join("topology.json")
    })?;
    let values = config.sweep.gamma_values.clone();
    run_sweep("gamma", &values, config, out_dir, |gamma, seed| {
        let mut cfg = config.clone();
        cfg.train.gamma = gamma;
        validate_train(&cfg.train)?;
        Ok(run_training(&cfg, &topology, config.variant, seed)?.history)
    })
}

/// `sweep-sparsity`: train on edge-thinned copies of the topology.
pub fn cmd_sweep_sparsity(config: &ResolvedConfig, out_dir: &Path) -> Result<SweepSeries> {
    let topology = config.load_or_generate_topology()?;
    save_topology(&topology, &{
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        out_dir.join("topology.json")
    })?;
    let values = config.sweep.retention_ratios.clone();
    run_sweep("sparsity", &values, config, out_dir, |ratio, seed| {
        let sparse = sparsify_topology(
            &topology,
            ratio,
            rng::derive_seed(DEFAULT_TOPOLOGY_SEED, "sparsity", &[(ratio * 1000.0) as u64]),
        )?;
        Ok(run_training(config, &sparse, config.variant, seed)?.history)
    })
}

/// `sweep-dim`: encoder input-projection width grid.
pub fn cmd_sweep_dim(config: &ResolvedConfig, out_dir: &Path) -> Result<SweepSeries> {
    let topology = config.load_or_generate_topology()?;
    save_topology(&topology, &{
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        out_dir.join("topology.json")
    })?;
    let values: Vec<f64> = config.sweep.feature_dims.iter().map(|&d| d as f64).collect();
    run_sweep("dim", &values, config, out_dir, |dim, seed| {
        let mut cfg = config.clone();
        cfg.encoder_d = dim as usize;
        Ok(run_training(&cfg, &topology, config.variant, seed)?.history)
    })
}

/// Output directory fallback per mode.
pub fn default_output_dir(mode: &str) -> PathBuf {
    PathBuf::from(format!("out/{mode}"))
}
