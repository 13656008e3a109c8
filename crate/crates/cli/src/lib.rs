//! Library side of the `transzero` binary: argument parsing and the four
//! subcommands.

pub mod config;
pub mod plot;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;
use transzero_core::bench::{report_csv, run_bench, speedup_report, BenchError, ReportRow};
use transzero_core::envs::Environment;
use transzero_core::networks::NetworkBundle;
use transzero_core::tensor::checkpoint;
use transzero_core::training::{evaluate, train, TrainSummary};

pub use config::RunConfig;

/// Exit status 2 for bad input (usage, config, mismatched checkpoint) and 1
/// for failures while running.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

#[derive(Debug, Parser)]
#[command(
    name = "transzero",
    version,
    about = "Planning with parallel subtree expansion"
)]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Self-play training; writes metrics.csv, checkpoints/ and config.toml.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Shorthand for `--set training.episodes=N`.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Greedy evaluation of a checkpoint; prints mean reward and standard error.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Defaults to `<output_dir>/checkpoints/latest.tzck`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Seed for the evaluation environments.
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
    },
    /// Times parallel against sequential expansion; writes bench.csv.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        /// Weights to time with; a fresh network when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Draws learning curves from metrics files as an SVG.
    Plot {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run config; every field is optional.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set planner.num_simulations=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; beats the config file and the environment.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    /// Defaults < file < environment < flags.
    pub fn resolve(&self, extra: &[String]) -> Result<RunConfig, CliError> {
        let mut overrides = self.overrides.clone();
        overrides.extend_from_slice(extra);
        let mut cfg = RunConfig::load(self.config.as_deref(), &overrides)?;
        cfg.apply_env();
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.out_dir {
            cfg.output_dir = dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, episodes } => {
            let extra: Vec<String> = episodes
                .map(|n| format!("training.episodes={n}"))
                .into_iter()
                .collect();
            let cfg = config.resolve(&extra)?;
            let stop = Arc::new(AtomicBool::new(false));
            let flag = Arc::clone(&stop);
            if let Err(e) = ctrlc::set_handler(move || {
                flag.store(true, std::sync::atomic::Ordering::Relaxed);
            }) {
                log::warn!("cannot install interrupt handler: {e}");
            }
            let summary = cmd_train(&cfg, &stop)?;
            println!(
                "episodes {} gradient steps {} env steps {}{}",
                summary.episodes,
                summary.steps,
                summary.env_steps,
                if summary.interrupted {
                    " (interrupted)"
                } else {
                    ""
                }
            );
            println!("checkpoint {}", summary.checkpoint.display());
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            episodes,
            eval_seed,
        } => {
            let cfg = config.resolve(&[])?;
            let ckpt = checkpoint.unwrap_or_else(|| default_checkpoint(&cfg));
            let r = cmd_eval(&cfg, &ckpt, episodes, eval_seed)?;
            println!(
                "mean_reward {:.4} stderr {:.4} episodes {}",
                r.mean, r.stderr, r.episodes
            );
            Ok(())
        }
        Command::Bench { config, checkpoint } => {
            let cfg = config.resolve(&[])?;
            let report = cmd_bench(&cfg, checkpoint.as_deref())?;
            print!("{}", report_csv(&report));
            Ok(())
        }
        Command::Plot { metrics, output } => plot::cmd_plot(&metrics, &output),
    }
}

pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("checkpoints").join("latest.tzck")
}

fn prepare_output(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| {
        CliError::Runtime(anyhow::anyhow!(
            "cannot create output directory {}: {e}",
            cfg.output_dir.display()
        ))
    })?;
    let path = cfg.output_dir.join(config::SNAPSHOT_NAME);
    fs::write(&path, cfg.to_toml())
        .map_err(|e| runtime(anyhow::anyhow!("writing {}: {e}", path.display())))
}

/// Trains with `cfg`, writing everything under `cfg.output_dir`.
pub fn cmd_train(cfg: &RunConfig, stop: &AtomicBool) -> Result<TrainSummary, CliError> {
    prepare_output(cfg)?;
    train(&cfg.train_setup(), &cfg.output_dir, cfg.model_hash(), stop).map_err(runtime)
}

/// Loads a checkpoint written for a config with the same model hash.
pub fn load_network(cfg: &RunConfig, path: &Path) -> Result<NetworkBundle, CliError> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::Usage(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let (hash, params) = checkpoint::load(std::io::BufReader::new(file))
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if hash != cfg.model_hash() {
        return Err(CliError::Usage(format!(
            "checkpoint {} was written for config hash {hash:016x}, current config hashes to {:016x}",
            path.display(),
            cfg.model_hash()
        )));
    }
    let env = cfg
        .env
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    NetworkBundle::with_params(
        cfg.network.clone(),
        env.obs_dim(),
        env.num_actions(),
        &params,
    )
    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub episodes: usize,
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`; 0 for a single episode.
    pub stderr: f64,
    pub returns: Vec<f64>,
}

/// Mean and standard error of `xs`.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Greedy evaluation; writes `eval.csv` into the output directory.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    episodes: usize,
    seed: u64,
) -> Result<EvalResult, CliError> {
    if episodes == 0 {
        return Err(CliError::Usage("episodes must be >= 1".into()));
    }
    let net = load_network(cfg, checkpoint)?;
    let returns = evaluate(&net, &cfg.env, &cfg.planner, episodes, seed).map_err(runtime)?;
    let (mean, stderr) = mean_stderr(&returns);
    fs::create_dir_all(&cfg.output_dir).map_err(runtime)?;
    let path = cfg.output_dir.join("eval.csv");
    let mut w = csv::Writer::from_path(&path).map_err(runtime)?;
    w.write_record(["checkpoint", "episodes", "seed", "mean_reward", "stderr"])
        .map_err(runtime)?;
    w.write_record([
        checkpoint.display().to_string(),
        episodes.to_string(),
        seed.to_string(),
        format!("{mean:.6}"),
        format!("{stderr:.6}"),
    ])
    .map_err(runtime)?;
    w.flush().map_err(runtime)?;
    Ok(EvalResult {
        episodes,
        mean,
        stderr,
        returns,
    })
}

/// Benchmarks planning from the first observation of `bench.env_seed`;
/// writes `bench.csv` into the output directory.
pub fn cmd_bench(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<ReportRow>, CliError> {
    let mut env = cfg
        .env
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let net = match checkpoint {
        Some(p) => load_network(cfg, p)?,
        None => NetworkBundle::new(
            cfg.network.clone(),
            env.obs_dim(),
            env.num_actions(),
            cfg.seed,
        )
        .map_err(runtime)?,
    };
    let obs = env.reset(cfg.bench.env_seed).map_err(runtime)?;
    let bench_err = |e: BenchError| match e {
        BenchError::Config(_) | BenchError::MissingBaseline => CliError::Usage(e.to_string()),
        other => runtime(other),
    };
    let rows = run_bench(&net, &obs, &cfg.planner, &cfg.bench).map_err(bench_err)?;
    let report = speedup_report(&rows).map_err(bench_err)?;
    fs::create_dir_all(&cfg.output_dir).map_err(runtime)?;
    let path = cfg.output_dir.join("bench.csv");
    let mut f = fs::File::create(&path).map_err(runtime)?;
    f.write_all(report_csv(&report).as_bytes())
        .map_err(runtime)?;
    Ok(report)
}
