//! `tagrl` command-line harness: topology generation, training, evaluation,
//! ablations, sensitivity sweeps, and the gradient check.
//!
//! Exit codes: 0 on success, 2 on validation errors, 3 on numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tagrl::experiment::{
    self, default_output_dir, ExperimentFile, Preset, ResolvedConfig,
};
use tagrl::graph::{generate_geant_like, save_topology, GeneratorConfig};
use tagrl::trainer::run_grad_check;
use tagrl::Error;

#[derive(Parser)]
#[command(
    name = "tagrl",
    about = "Topology-aware graph reinforcement learning routing laboratory",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON experiment config; CLI flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Scale preset.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    match s {
        "desk" => Ok(Preset::Desk),
        "paper" => Ok(Preset::Paper),
        other => Err(format!("unknown preset '{other}' (expected desk or paper)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a clustered synthetic topology file.
    GenTopology {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        nodes: usize,
        #[arg(long, default_value_t = 5)]
        clusters: usize,
    },
    /// Train one variant on one seed.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Replay a checkpointed policy against the shortest-path baseline.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        topology: PathBuf,
        #[arg(long, default_value_t = 8)]
        episodes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run all four ablation variants over the seed list.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Discount-factor sensitivity sweep.
    SweepGamma {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Graph-retention (edge sparsity) sweep.
    SweepSparsity {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Encoder feature-dimension sweep.
    SweepDim {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Verify analytic gradients against central finite differences.
    CheckGrad {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        coords: usize,
    },
}

fn resolve(mode: &str, common: &CommonArgs, variant: Option<&str>, seed: Option<u64>)
    -> tagrl::Result<ResolvedConfig>
{
    let mut file = match &common.config {
        Some(path) => ExperimentFile::load(path)?,
        None => ExperimentFile::default(),
    };
    if let Some(preset) = common.preset {
        file.preset = Some(preset);
    }
    if let Some(seeds) = &common.seeds {
        file.seeds = Some(seeds.clone());
    }
    if let Some(v) = variant {
        file.variant = Some(v.to_string());
    }
    if let Some(s) = seed {
        file.seeds = Some(vec![s]);
    }
    ResolvedConfig::resolve(mode, &file)
}

fn out_dir(common: &CommonArgs, file_dir: &Option<String>, mode: &str) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| file_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| default_output_dir(mode))
}

fn run() -> tagrl::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenTopology {
            seed,
            out,
            nodes,
            clusters,
        } => {
            let config = if nodes == 40 && clusters == 5 {
                GeneratorConfig::default()
            } else {
                GeneratorConfig::for_size(nodes, clusters)
            };
            let topology = generate_geant_like(seed, &config)?;
            save_topology(&topology, &out)?;
            let manifest = serde_json::json!({
                "mode": "gen_topology",
                "seed": seed,
                "generator": &config,
            });
            let manifest_path = out.with_extension("manifest.json");
            std::fs::write(
                &manifest_path,
                serde_json::to_string_pretty(&manifest).expect("manifest") + "\n",
            )
            .map_err(|e| Error::Io {
                path: manifest_path.display().to_string(),
                source: e,
            })?;
            println!(
                "wrote {} ({} nodes, {} links)",
                out.display(),
                topology.n(),
                topology.num_edges()
            );
        }
        Command::Train {
            common,
            seed,
            variant,
        } => {
            let config = resolve("train", &common, variant.as_deref(), seed)?;
            let dir = {
                let file_out = common
                    .config
                    .as_ref()
                    .map(|p| ExperimentFile::load(p))
                    .transpose()?
                    .and_then(|f| f.output_dir);
                out_dir(&common, &file_out, "train")
            };
            let seed = *config.seeds.first().unwrap_or(&1);
            let artifacts = experiment::cmd_train(&config, seed, &dir)?;
            let last = artifacts.history.last();
            println!(
                "trained {} epochs (variant {}, seed {}); final mean reward {:.4}; outputs in {}",
                artifacts.history.len(),
                config.variant.name(),
                seed,
                last.map_or(f64::NAN, |r| r.reward),
                dir.display()
            );
        }
        Command::Eval {
            checkpoint,
            topology,
            episodes,
            seed,
            out,
        } => {
            let dir = out.unwrap_or_else(|| default_output_dir("eval"));
            let csv = experiment::cmd_eval(&checkpoint, &topology, episodes, seed, &dir)?;
            print!("{csv}");
        }
        Command::Ablate { common } => {
            let config = resolve("ablate", &common, None, None)?;
            let dir = out_dir(&common, &None, "ablate");
            let rows = experiment::cmd_ablate(&config, &dir)?;
            for row in &rows {
                println!(
                    "{:<8} seed {}: reward {:.4} ± {:.4}",
                    row.variant.name(),
                    row.seed,
                    row.reward_mean,
                    row.reward_std
                );
            }
            println!("outputs in {}", dir.display());
        }
        Command::SweepGamma { common } => {
            let config = resolve("sweep_gamma", &common, None, None)?;
            let dir = out_dir(&common, &None, "sweep_gamma");
            print_series(&experiment::cmd_sweep_gamma(&config, &dir)?);
        }
        Command::SweepSparsity { common } => {
            let config = resolve("sweep_sparsity", &common, None, None)?;
            let dir = out_dir(&common, &None, "sweep_sparsity");
            print_series(&experiment::cmd_sweep_sparsity(&config, &dir)?);
        }
        Command::SweepDim { common } => {
            let config = resolve("sweep_dim", &common, None, None)?;
            let dir = out_dir(&common, &None, "sweep_dim");
            print_series(&experiment::cmd_sweep_dim(&config, &dir)?);
        }
        Command::CheckGrad { seed, coords } => {
            let report = run_grad_check(seed, coords, None)?;
            let canary = run_grad_check(seed, coords, Some(1.01))?;
            println!(
                "gradient check: max relative error {:.3e} over {} coordinates",
                report.max_rel_error, report.coords_checked
            );
            println!(
                "canary (one coordinate scaled by 1.01): max relative error {:.3e}",
                canary.max_rel_error
            );
            if report.max_rel_error >= 1e-4 {
                return Err(Error::NonFinite(format!(
                    "gradient check failed: {:.3e} >= 1e-4",
                    report.max_rel_error
                )));
            }
            if canary.max_rel_error < 1e-4 {
                return Err(Error::NonFinite(
                    "canary passed the check; the oracle is not sensitive".into(),
                ));
            }
            println!("pass");
        }
    }
    Ok(())
}

fn print_series(series: &experiment::SweepSeries) {
    for point in &series.points {
        println!(
            "{} = {:<8}: reward {:.4} ± {:.4}",
            series.sweep, point.value, point.mean_reward, point.stdev_reward
        );
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
