//! Run configuration: defaults, TOML file, `--set` overrides, hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use transzero_core::bench::BenchConfig;
use transzero_core::envs::EnvConfig;
use transzero_core::networks::NetworkConfig;
use transzero_core::planner::PlannerConfig;
use transzero_core::training::{TrainSetup, TrainingConfig};

use crate::CliError;

/// Environment variable that replaces `output_dir`.
pub const OUT_DIR_ENV: &str = "TRANSZERO_OUT_DIR";

/// File name of the config snapshot written into every output directory.
pub const SNAPSHOT_NAME: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub env: EnvConfig,
    pub network: NetworkConfig,
    pub planner: PlannerConfig,
    pub training: TrainingConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            env: EnvConfig::default(),
            network: NetworkConfig::default(),
            planner: PlannerConfig::default(),
            training: TrainingConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then `path` if given, then each `key=value` override.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Usage(format!("cannot read config {}: {e}", p.display()))
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let text = toml::to_string(&table).map_err(|e| CliError::Usage(e.to_string()))?;
        let origin = match path {
            Some(p) if overrides.is_empty() => p.display().to_string(),
            Some(p) => format!("{} with --set overrides", p.display()),
            None => "--set overrides".to_string(),
        };
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{origin}: {e}")))?;
        Ok(cfg)
    }

    /// Applies the output-directory environment override.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            if !dir.is_empty() {
                self.output_dir = PathBuf::from(dir);
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |section: &str, e: String| CliError::Usage(format!("[{section}] {e}"));
        self.env.build().map_err(|e| usage("env", e.to_string()))?;
        self.network
            .validate()
            .map_err(|e| usage("network", e.to_string()))?;
        self.planner
            .validate()
            .map_err(|e| usage("planner", e.to_string()))?;
        self.training
            .validate()
            .map_err(|e| usage("training", e.to_string()))?;
        self.bench
            .validate()
            .map_err(|e| usage("bench", e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            env: self.env.clone(),
            network: self.network.clone(),
            planner: self.planner.clone(),
            training: self.training.clone(),
            seed: self.seed,
        }
    }

    /// Identifies the network's shape and inputs; stored in checkpoints.
    pub fn model_hash(&self) -> u64 {
        #[derive(Serialize)]
        struct Key<'a> {
            env: &'a EnvConfig,
            network: &'a NetworkConfig,
        }
        let text = toml::to_string(&Key {
            env: &self.env,
            network: &self.network,
        })
        .expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    /// Identifies an experiment across seeds: the whole config except the
    /// seed and the output directory, as hex.
    pub fn experiment_hash(&self) -> String {
        let key = RunConfig {
            seed: 0,
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let digest = Sha256::digest(key.to_toml().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Sets a dotted `key=value` in `table`. The value is read as a TOML value
/// and falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override `{key}`: `{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
