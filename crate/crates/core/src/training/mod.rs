//! Self-play, replay, the unrolled training loss and the training loop.

mod loss;
mod replay;

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{EnvConfig, EnvError, Environment};
use crate::networks::{NetworkBundle, NetworkConfig, NetworkError};
use crate::planner::{act, plan, LatentModel, PlanError, PlannerConfig};
use crate::tensor::checkpoint::{self, CheckpointError};
use crate::tensor::{adam_step, AdamConfig, AdamState, TensorError};

pub use loss::{unrolled_loss, unrolled_loss_on, LossReport, LossTerms, LossWeights, Sample};
pub use replay::{make_targets, value_target, ReplayBuffer, Targets, Trajectory};

pub const METRICS_HEADER: &str =
    "step,episodes,env_steps,mean_reward,value_loss,reward_loss,policy_loss,nodes_per_sim,plan_ms";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("invalid training config: {0}")]
    Config(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> TrainError {
    let context = context.into();
    move |source| TrainError::Io { context, source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub episodes: usize,
    /// Gradient steps taken after each self-play episode.
    pub train_steps_per_episode: usize,
    /// Episodes collected before the first gradient step.
    pub warmup_episodes: usize,
    pub batch_size: usize,
    pub unroll_steps: usize,
    pub td_steps: usize,
    /// Trajectories kept in the replay buffer.
    pub buffer_capacity: usize,
    pub loss_weights: LossWeights,
    pub optimizer: AdamConfig,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Action temperature for the second half of training. The first half
    /// uses the planner temperature.
    pub late_temperature: f64,
    /// Gradient steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: usize,
    /// Episodes per metrics row.
    pub log_interval: usize,
    /// Fill the `plan_ms` column. Off by default so metrics stay
    /// reproducible byte for byte.
    pub record_wall_clock: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            episodes: 500,
            train_steps_per_episode: 4,
            warmup_episodes: 10,
            batch_size: 32,
            unroll_steps: 5,
            td_steps: 5,
            buffer_capacity: 500,
            loss_weights: LossWeights::default(),
            optimizer: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            grad_clip: 5.0,
            late_temperature: 0.25,
            checkpoint_interval: 1000,
            log_interval: 1,
            record_wall_clock: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if self.unroll_steps == 0 {
            return fail("unroll_steps must be >= 1");
        }
        if self.td_steps == 0 {
            return fail("td_steps must be >= 1");
        }
        if self.buffer_capacity == 0 {
            return fail("buffer_capacity must be >= 1");
        }
        if self.log_interval == 0 {
            return fail("log_interval must be >= 1");
        }
        if !(self.optimizer.lr > 0.0) {
            return fail("optimizer.lr must be > 0");
        }
        if !(self.grad_clip >= 0.0) {
            return fail("grad_clip must be >= 0");
        }
        if !(self.late_temperature > 0.0) {
            return fail("late_temperature must be > 0");
        }
        Ok(())
    }
}

/// Everything a training run depends on besides where it writes.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSetup {
    pub env: EnvConfig,
    pub network: NetworkConfig,
    pub planner: PlannerConfig,
    pub training: TrainingConfig,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct EpisodeStats {
    pub trajectory: Trajectory,
    pub plan_calls: usize,
    pub nodes_expanded: usize,
    pub plan_time: Duration,
}

/// Plays one episode from the environment's current state, planning before
/// every move.
pub fn self_play_episode<E, M, R>(
    env: &mut E,
    model: &M,
    planner: &PlannerConfig,
    temperature: f64,
    rng: &mut R,
) -> Result<EpisodeStats>
where
    E: Environment + ?Sized,
    M: LatentModel + ?Sized,
    R: Rng + ?Sized,
{
    let mut stats = EpisodeStats {
        trajectory: Trajectory {
            observations: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            policies: Vec::new(),
            root_values: Vec::new(),
        },
        plan_calls: 0,
        nodes_expanded: 0,
        plan_time: Duration::ZERO,
    };
    let mut obs = env.observation();
    while !env.is_done() {
        let result = plan(&obs, model, planner, rng)?;
        stats.plan_calls += 1;
        stats.nodes_expanded += result.nodes_expanded;
        stats.plan_time += result.wall_time;
        let action = act(&result.root_policy, temperature, rng);
        let step = env.step(action)?;
        let next = step.observation;
        stats.trajectory.push(
            obs,
            action,
            step.reward,
            result.root_policy,
            result.root_value,
        );
        obs = next;
    }
    Ok(stats)
}

/// Returns of `episodes` greedy episodes with root noise off. Episode `i`
/// starts from an environment seed drawn from `seed`.
pub fn evaluate<M: LatentModel + ?Sized>(
    model: &M,
    env: &EnvConfig,
    planner: &PlannerConfig,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let planner = PlannerConfig {
        noise_fraction: 0.0,
        ..planner.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = env.build()?;
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        env.reset(rng.random())?;
        let stats = self_play_episode(&mut env, model, &planner, 0.0, &mut rng)?;
        returns.push(stats.trajectory.total_reward());
    }
    Ok(returns)
}

/// Returns of `episodes` episodes with uniformly random actions.
pub fn random_policy_returns(env: &EnvConfig, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = env.build()?;
    let a = env.num_actions();
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        env.reset(rng.random())?;
        let mut total = 0.0;
        while !env.is_done() {
            total += env.step(rng.random_range(0..a))?.reward;
        }
        returns.push(total);
    }
    Ok(returns)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub network: NetworkBundle,
    pub steps: usize,
    pub episodes: usize,
    pub env_steps: usize,
    /// Return of every completed episode, in order.
    pub episode_returns: Vec<f64>,
    pub interrupted: bool,
    /// Path of the last checkpoint written.
    pub checkpoint: PathBuf,
}

/// Aggregates one metrics row.
#[derive(Default)]
struct Window {
    episodes: usize,
    reward: f64,
    losses: usize,
    value: f64,
    reward_loss: f64,
    policy: f64,
    plan_calls: usize,
    nodes: usize,
    plan_time: Duration,
}

impl Window {
    fn row(
        &self,
        step: usize,
        episodes: usize,
        env_steps: usize,
        sims: usize,
        wall: bool,
    ) -> String {
        let mut s = format!(
            "{step},{episodes},{env_steps},{:.6}",
            self.reward / self.episodes.max(1) as f64
        );
        for v in [self.value, self.reward_loss, self.policy] {
            if self.losses > 0 {
                write!(s, ",{:.6}", v / self.losses as f64).expect("string write");
            } else {
                s.push(',');
            }
        }
        if self.plan_calls > 0 && sims > 0 {
            write!(
                s,
                ",{:.6}",
                self.nodes as f64 / (self.plan_calls * sims) as f64
            )
            .expect("string write");
        } else {
            s.push(',');
        }
        if wall {
            write!(s, ",{:.3}", self.plan_time.as_secs_f64() * 1e3).expect("string write");
        } else {
            s.push(',');
        }
        s
    }
}

/// Runs self-play and training, writing `metrics.csv` and checkpoints under
/// `out_dir`. Setting `stop` ends the run early after saving a checkpoint.
pub fn train(
    setup: &TrainSetup,
    out_dir: &Path,
    config_hash: u64,
    stop: &AtomicBool,
) -> Result<TrainSummary> {
    let cfg = &setup.training;
    cfg.validate()?;
    setup.planner.validate()?;
    setup.network.validate()?;

    let mut env = setup.env.build()?;
    let mut net = NetworkBundle::new(
        setup.network.clone(),
        env.obs_dim(),
        env.num_actions(),
        setup.seed,
    )?;
    let num_actions = env.num_actions();
    let mut adam = AdamState::new(net.params());
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed ^ 0x5eed_5eed_5eed_5eed);

    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io_err(format!("creating {}", ckpt_dir.display())))?;
    let metrics_path = out_dir.join("metrics.csv");
    let file = fs::File::create(&metrics_path)
        .map_err(io_err(format!("creating {}", metrics_path.display())))?;
    let mut metrics = BufWriter::new(file);
    writeln!(metrics, "{METRICS_HEADER}").map_err(io_err("writing metrics"))?;

    let save = |net: &NetworkBundle, name: &str| -> Result<PathBuf> {
        let path = ckpt_dir.join(name);
        let bytes = checkpoint::to_bytes(net.params(), config_hash);
        fs::write(&path, bytes).map_err(io_err(format!("writing {}", path.display())))?;
        Ok(path)
    };

    let mut summary_returns = Vec::with_capacity(cfg.episodes);
    let (mut steps, mut env_steps) = (0usize, 0usize);
    let mut window = Window::default();
    let mut interrupted = false;
    let mut episodes_done = 0;

    for episode in 0..cfg.episodes {
        if stop.load(Ordering::Relaxed) {
            interrupted = true;
            break;
        }
        let temperature = if episode < cfg.episodes / 2 {
            setup.planner.temperature
        } else {
            cfg.late_temperature
        };
        env.reset(rng.random())?;
        let stats = self_play_episode(&mut env, &net, &setup.planner, temperature, &mut rng)?;
        let ret = stats.trajectory.total_reward();
        env_steps += stats.trajectory.len();
        summary_returns.push(ret);
        window.episodes += 1;
        window.reward += ret;
        window.plan_calls += stats.plan_calls;
        window.nodes += stats.nodes_expanded;
        window.plan_time += stats.plan_time;
        buffer.push(stats.trajectory);
        episodes_done += 1;

        if episodes_done >= cfg.warmup_episodes {
            for _ in 0..cfg.train_steps_per_episode {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let batch =
                    sample_batch(&buffer, cfg, setup.planner.mvc.gamma, num_actions, &mut rng);
                let report =
                    train_step(&mut net, &mut adam, &batch, cfg).map_err(|e| annotate(e, steps))?;
                steps += 1;
                window.losses += 1;
                window.value += report.value_loss;
                window.reward_loss += report.reward_loss;
                window.policy += report.policy_loss;
                if cfg.checkpoint_interval > 0 && steps % cfg.checkpoint_interval == 0 {
                    save(&net, &format!("step_{steps:08}.tzck"))?;
                }
            }
        }

        if episodes_done % cfg.log_interval == 0 || episodes_done == cfg.episodes {
            let row = window.row(
                steps,
                episodes_done,
                env_steps,
                setup.planner.num_simulations,
                cfg.record_wall_clock,
            );
            writeln!(metrics, "{row}").map_err(io_err("writing metrics"))?;
            log::info!("{row}");
            window = Window::default();
        }
    }
    if window.episodes > 0 {
        let row = window.row(
            steps,
            episodes_done,
            env_steps,
            setup.planner.num_simulations,
            cfg.record_wall_clock,
        );
        writeln!(metrics, "{row}").map_err(io_err("writing metrics"))?;
    }
    metrics.flush().map_err(io_err("writing metrics"))?;
    let checkpoint = save(&net, "latest.tzck")?;
    Ok(TrainSummary {
        network: net,
        steps,
        episodes: episodes_done,
        env_steps,
        episode_returns: summary_returns,
        interrupted,
        checkpoint,
    })
}

fn annotate(e: TrainError, step: usize) -> TrainError {
    match e {
        TrainError::NonFinite(msg) => TrainError::NonFinite(format!("gradient step {step}: {msg}")),
        other => other,
    }
}

/// Draws `batch_size` unrolls uniformly from the buffer.
pub fn sample_batch<R: Rng + ?Sized>(
    buffer: &ReplayBuffer,
    cfg: &TrainingConfig,
    gamma: f64,
    num_actions: usize,
    rng: &mut R,
) -> Vec<Sample> {
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let Some((traj, t)) = buffer.sample(rng) else {
            break;
        };
        let mut filler = || rng.random_range(0..num_actions);
        let targets = make_targets(traj, t, cfg.unroll_steps, cfg.td_steps, gamma, &mut filler);
        batch.push(Sample {
            observation: traj.observations[t].clone(),
            targets,
        });
    }
    batch
}

/// One clipped Adam update on `batch`.
pub fn train_step(
    net: &mut NetworkBundle,
    adam: &mut AdamState,
    batch: &[Sample],
    cfg: &TrainingConfig,
) -> Result<LossReport> {
    let (report, mut grads) = unrolled_loss(net, batch, &cfg.loss_weights)?;
    if cfg.grad_clip > 0.0 && report.grad_norm > cfg.grad_clip {
        let s = cfg.grad_clip / report.grad_norm;
        for g in &mut grads {
            *g = g.map(|x| x * s);
        }
    }
    adam_step(net.params_mut(), &grads, adam, &cfg.optimizer)?;
    Ok(report)
}
