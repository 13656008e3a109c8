//! Wall-clock comparison of whole-subtree expansion against rebuilding the
//! same node set one node at a time.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::{plan, replay_sequential, LatentModel, PlanError, PlannerConfig, PlannerMode};
use crate::tree::SearchTree;

pub const BENCH_HEADER: &str = "mode,sims,layers,nodes,median_ms,iqr_ms,per_node_us,relative";

/// Largest statistic difference tolerated before timing a pair.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(
        "parallel and sequential trees differ by {diff:e} at sims={sims} layers={layers}\n\
         parallel:\n{parallel}\nsequential:\n{sequential}"
    )]
    Mismatch {
        sims: usize,
        layers: usize,
        diff: f64,
        parallel: String,
        sequential: String,
    },
    #[error("no sequential baseline row to normalize against")]
    MissingBaseline,
    #[error("invalid bench config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchCase {
    pub sims: usize,
    pub layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub cases: Vec<BenchCase>,
    pub repetitions: usize,
    pub warmup: usize,
    /// Environment seed for the observation planned from.
    pub env_seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            cases: vec![
                BenchCase { sims: 1, layers: 1 },
                BenchCase { sims: 2, layers: 2 },
                BenchCase { sims: 4, layers: 2 },
                BenchCase { sims: 2, layers: 3 },
            ],
            repetitions: 10,
            warmup: 2,
            env_seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.repetitions < 10 {
            return Err(BenchError::Config(format!(
                "repetitions must be >= 10, got {}",
                self.repetitions
            )));
        }
        if self.cases.is_empty() {
            return Err(BenchError::Config("no bench cases".into()));
        }
        if let Some(c) = self.cases.iter().find(|c| c.sims == 0 || c.layers == 0) {
            return Err(BenchError::Config(format!(
                "case sims={} layers={} must have sims and layers >= 1",
                c.sims, c.layers
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    /// One forward per simulation over the whole new subtree.
    Parallel,
    /// One forward per node, over that node's root path.
    Sequential,
}

impl BenchMode {
    pub fn label(self) -> &'static str {
        match self {
            BenchMode::Parallel => "parallel",
            BenchMode::Sequential => "sequential",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub sims: usize,
    pub layers: usize,
    pub nodes: usize,
    pub median: Duration,
    pub iqr: Duration,
    pub equivalence_checked: bool,
}

impl BenchRow {
    pub fn per_node(&self) -> Duration {
        self.median / self.nodes.max(1) as u32
    }
}

/// Median and interquartile range with linear interpolation.
pub fn median_iqr(samples: &[Duration]) -> (Duration, Duration) {
    assert!(!samples.is_empty());
    let mut s: Vec<f64> = samples.iter().map(Duration::as_secs_f64).collect();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (s.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
    };
    (
        Duration::from_secs_f64(q(0.5)),
        Duration::from_secs_f64(q(0.75) - q(0.25)),
    )
}

/// Largest difference in Q, variance or value between two trees with the
/// same node ids.
pub fn max_stat_diff(a: &SearchTree, b: &SearchTree) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.nodes()
        .iter()
        .zip(b.nodes())
        .map(|(x, y)| {
            if x.parent != y.parent || x.action != y.action {
                return f64::INFINITY;
            }
            (x.q_value - y.q_value)
                .abs()
                .max((x.variance - y.variance).abs())
                .max((x.value - y.value).abs())
                .max((x.reward - y.reward).abs())
        })
        .fold(0.0, f64::max)
}

fn time<F: FnMut() -> Result<(), BenchError>>(
    warmup: usize,
    reps: usize,
    mut f: F,
) -> Result<(Duration, Duration), BenchError> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed());
    }
    Ok(median_iqr(&samples))
}

/// For each case, plans with whole-subtree expansion, rebuilds the same
/// tree one node at a time, checks the two agree, then times both. Weights
/// are never modified.
pub fn run_bench<M: LatentModel + ?Sized>(
    model: &M,
    observation: &[f64],
    planner: &PlannerConfig,
    config: &BenchConfig,
) -> Result<Vec<BenchRow>, BenchError> {
    config.validate()?;
    let mut rows = Vec::with_capacity(2 * config.cases.len());
    for case in &config.cases {
        let cfg = PlannerConfig {
            mode: PlannerMode::ParallelMvc,
            num_simulations: case.sims,
            subtree_layers: case.layers,
            noise_fraction: 0.0,
            ..planner.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reference = plan(observation, model, &cfg, &mut rng)?;
        let replay = replay_sequential(observation, model, &cfg.mvc, &reference.tree)?;
        let diff = max_stat_diff(&reference.tree, &replay);
        if !(diff <= EQUIVALENCE_TOLERANCE) {
            return Err(BenchError::Mismatch {
                sims: case.sims,
                layers: case.layers,
                diff,
                parallel: reference.tree.dump(&cfg.mvc),
                sequential: replay.dump(&cfg.mvc),
            });
        }
        let nodes = reference.nodes_expanded;

        let (median, iqr) = time(config.warmup, config.repetitions, || {
            plan(observation, model, &cfg, &mut rng)?;
            Ok(())
        })?;
        rows.push(BenchRow {
            mode: BenchMode::Parallel,
            sims: case.sims,
            layers: case.layers,
            nodes,
            median,
            iqr,
            equivalence_checked: true,
        });
        let (median, iqr) = time(config.warmup, config.repetitions, || {
            replay_sequential(observation, model, &cfg.mvc, &reference.tree)?;
            Ok(())
        })?;
        rows.push(BenchRow {
            mode: BenchMode::Sequential,
            sims: case.sims,
            layers: case.layers,
            nodes,
            median,
            iqr,
            equivalence_checked: true,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub row: BenchRow,
    /// Per-node time over the baseline's per-node time.
    pub relative: f64,
}

/// Normalizes per-node times to the sequential row of the same case, or to
/// the first sequential row when a case has none.
pub fn speedup_report(rows: &[BenchRow]) -> Result<Vec<ReportRow>, BenchError> {
    let first = rows
        .iter()
        .find(|r| r.mode == BenchMode::Sequential)
        .ok_or(BenchError::MissingBaseline)?;
    Ok(rows
        .iter()
        .map(|r| {
            let base = rows
                .iter()
                .find(|b| {
                    b.mode == BenchMode::Sequential && b.sims == r.sims && b.layers == r.layers
                })
                .unwrap_or(first);
            ReportRow {
                row: r.clone(),
                relative: r.per_node().as_secs_f64() / base.per_node().as_secs_f64(),
            }
        })
        .collect())
}

/// CSV text with [`BENCH_HEADER`].
pub fn report_csv(report: &[ReportRow]) -> String {
    let mut out = format!("{BENCH_HEADER}\n");
    for r in report {
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.3},{:.6}",
            r.row.mode.label(),
            r.row.sims,
            r.row.layers,
            r.row.nodes,
            r.row.median.as_secs_f64() * 1e3,
            r.row.iqr.as_secs_f64() * 1e3,
            r.row.per_node().as_secs_f64() * 1e6,
            r.relative
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{NetworkBundle, NetworkConfig};

    fn row(mode: BenchMode, sims: usize, ms: u64, nodes: usize) -> BenchRow {
        BenchRow {
            mode,
            sims,
            layers: 2,
            nodes,
            median: Duration::from_millis(ms),
            iqr: Duration::ZERO,
            equivalence_checked: true,
        }
    }

    #[test]
    fn median_and_iqr_of_known_samples() {
        let s: Vec<Duration> = [5, 1, 3, 2, 4]
            .iter()
            .map(|&m| Duration::from_millis(m))
            .collect();
        let (m, iqr) = median_iqr(&s);
        assert!((m.as_secs_f64() - 0.003).abs() < 1e-12);
        assert!((iqr.as_secs_f64() - 0.002).abs() < 1e-12);
    }

    #[test]
    fn baseline_is_one_and_identical_rows_match() {
        let rows = vec![
            row(BenchMode::Sequential, 2, 10, 24),
            row(BenchMode::Parallel, 2, 5, 24),
            row(BenchMode::Parallel, 2, 5, 24),
        ];
        let rep = speedup_report(&rows).unwrap();
        assert_eq!(rep[0].relative, 1.0);
        assert!((rep[1].relative - 0.5).abs() < 1e-9);
        assert_eq!(rep[1].relative, rep[2].relative);
        let csv = report_csv(&rep);
        assert_eq!(csv.lines().next().unwrap(), BENCH_HEADER);
        assert!(csv
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("sequential,2,2,24,10.000000,"));
    }

    #[test]
    fn missing_baseline_is_an_error() {
        let rows = vec![row(BenchMode::Parallel, 2, 5, 24)];
        assert!(matches!(
            speedup_report(&rows),
            Err(BenchError::MissingBaseline)
        ));
    }

    #[test]
    fn too_few_repetitions_are_rejected() {
        let cfg = BenchConfig {
            repetitions: 3,
            ..BenchConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(BenchError::Config(_))));
    }

    #[test]
    fn bench_counts_nodes_and_leaves_weights_alone() {
        let net_cfg = NetworkConfig {
            d_model: 8,
            heads: 2,
            layers: 1,
            ffn_hidden: 16,
            repr_hidden: 8,
            head_hidden: 8,
            max_depth: 16,
            scale_latents: false,
        };
        let net = NetworkBundle::new(net_cfg, 6, 4, 0).unwrap();
        let before = net.params().clone();
        let cfg = BenchConfig {
            cases: vec![BenchCase { sims: 2, layers: 3 }],
            repetitions: 10,
            warmup: 1,
            env_seed: 0,
        };
        let rows = run_bench(&net, &[0.5; 6], &PlannerConfig::default(), &cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.nodes == 168 && r.equivalence_checked));
        assert_eq!(net.params(), &before);
    }
}
