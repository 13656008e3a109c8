//! Environments: a lava grid world and a chain with a known optimal value.

mod chain;
mod grid;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use chain::{ChainMdp, ADVANCE, BACK};
pub use grid::{
    optimal_steps, GridSpec, GridWorld, Layout, Orientation, FORWARD, TURN_LEFT, TURN_RIGHT,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("step called after the episode ended")]
    EpisodeOver,
    #[error("action {action} out of range for {num_actions} actions")]
    Action { action: usize, num_actions: usize },
    #[error("goal unreachable from the start pose")]
    Unreachable,
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("invalid environment config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

pub trait Environment {
    fn num_actions(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn step_limit(&self) -> usize;
    /// Starts a new episode; the same seed always gives the same start.
    fn reset(&mut self, seed: u64) -> Result<Vec<f64>, EnvError>;
    fn step(&mut self, action: usize) -> Result<Step, EnvError>;
    fn observation(&self) -> Vec<f64>;
    fn is_done(&self) -> bool;
    fn describe(&self) -> String {
        String::new()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Grid,
    Chain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    /// Grid side length.
    pub size: usize,
    /// Number of lava cells.
    pub lava: usize,
    /// Episode length cap; 0 picks the environment's default.
    pub step_limit: usize,
    pub chain_length: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            kind: EnvKind::Grid,
            size: 3,
            lava: 2,
            step_limit: 0,
            chain_length: 5,
        }
    }
}

impl EnvConfig {
    pub fn build(&self) -> Result<AnyEnv, EnvError> {
        let limit = (self.step_limit > 0).then_some(self.step_limit);
        Ok(match self.kind {
            EnvKind::Grid => AnyEnv::Grid(GridWorld::new(GridSpec {
                size: self.size,
                lava: self.lava,
                step_limit: limit,
            })?),
            EnvKind::Chain => AnyEnv::Chain(ChainMdp::new(self.chain_length, limit)?),
        })
    }
}

/// Either environment behind one concrete type.
#[derive(Clone, Debug)]
pub enum AnyEnv {
    Grid(GridWorld),
    Chain(ChainMdp),
}

macro_rules! delegate {
    ($self:ident, $e:ident => $body:expr) => {
        match $self {
            AnyEnv::Grid($e) => $body,
            AnyEnv::Chain($e) => $body,
        }
    };
}

impl Environment for AnyEnv {
    fn num_actions(&self) -> usize {
        delegate!(self, e => e.num_actions())
    }

    fn obs_dim(&self) -> usize {
        delegate!(self, e => e.obs_dim())
    }

    fn step_limit(&self) -> usize {
        delegate!(self, e => e.step_limit())
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>, EnvError> {
        delegate!(self, e => e.reset(seed))
    }

    fn step(&mut self, action: usize) -> Result<Step, EnvError> {
        delegate!(self, e => e.step(action))
    }

    fn observation(&self) -> Vec<f64> {
        delegate!(self, e => e.observation())
    }

    fn is_done(&self) -> bool {
        delegate!(self, e => e.is_done())
    }

    fn describe(&self) -> String {
        delegate!(self, e => e.describe())
    }
}
