use std::collections::VecDeque;

use rand::Rng;

/// One self-play episode. `rewards[t]` is the reward received after taking
/// `actions[t]` in the state observed as `observations[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Search policy at each state, over real actions.
    pub policies: Vec<Vec<f64>>,
    /// Search value estimate at each state.
    pub root_values: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub(crate) fn push(
        &mut self,
        observation: Vec<f64>,
        action: usize,
        reward: f64,
        policy: Vec<f64>,
        root_value: f64,
    ) {
        self.observations.push(observation);
        self.actions.push(action);
        self.rewards.push(reward);
        self.policies.push(policy);
        self.root_values.push(root_value);
    }
}

/// Training targets for positions `0..=K` of one unroll starting at `t`.
/// Position `k` is the state `t+k`; its latent is produced by the actions
/// `a_t .. a_{t+k-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// `K` action tokens; past the episode end they are filler.
    pub actions: Vec<usize>,
    pub values: Vec<f64>,
    /// Reward for the transition into position `k`; position 0 has none.
    pub rewards: Vec<f64>,
    pub reward_mask: Vec<f64>,
    pub policies: Vec<Vec<f64>>,
    /// 1 where a real search policy exists, else 0.
    pub policy_mask: Vec<f64>,
}

/// n-step return from state `s`: discounted rewards `r_s .. r_{s+n-1}` plus
/// `γ^n` times the stored search value at `s+n`, truncated at the episode
/// end. States at or past the end are worth 0.
pub fn value_target(traj: &Trajectory, s: usize, n: usize, gamma: f64) -> f64 {
    let len = traj.len();
    let mut z = 0.0;
    let mut discount = 1.0;
    for i in 0..n {
        if s + i >= len {
            return z;
        }
        z += discount * traj.rewards[s + i];
        discount *= gamma;
    }
    if s + n < len {
        z += discount * traj.root_values[s + n];
    }
    z
}

/// Targets for an unroll of `k_steps` from state `t`. `filler` picks action
/// tokens for positions past the episode end.
pub fn make_targets(
    traj: &Trajectory,
    t: usize,
    k_steps: usize,
    n_bootstrap: usize,
    gamma: f64,
    filler: &mut dyn FnMut() -> usize,
) -> Targets {
    assert!(
        t < traj.len(),
        "start {t} outside trajectory of length {}",
        traj.len()
    );
    let num_actions = traj.policies[0].len();
    let uniform = vec![1.0 / num_actions as f64; num_actions];
    let mut out = Targets {
        actions: Vec::with_capacity(k_steps),
        values: Vec::with_capacity(k_steps + 1),
        rewards: Vec::with_capacity(k_steps + 1),
        reward_mask: Vec::with_capacity(k_steps + 1),
        policies: Vec::with_capacity(k_steps + 1),
        policy_mask: Vec::with_capacity(k_steps + 1),
    };
    for k in 0..=k_steps {
        let s = t + k;
        out.values.push(value_target(traj, s, n_bootstrap, gamma));
        if k == 0 {
            out.rewards.push(0.0);
            out.reward_mask.push(0.0);
        } else {
            out.rewards
                .push(traj.rewards.get(s - 1).copied().unwrap_or(0.0));
            out.reward_mask.push(1.0);
        }
        if s < traj.len() {
            out.policies.push(traj.policies[s].clone());
            out.policy_mask.push(1.0);
        } else {
            out.policies.push(uniform.clone());
            out.policy_mask.push(0.0);
        }
        if k < k_steps {
            out.actions
                .push(traj.actions.get(s).copied().unwrap_or_else(&mut *filler));
        }
    }
    out
}

/// Bounded FIFO of trajectories with uniform sampling over every
/// (trajectory, start state) pair.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    trajectories: VecDeque<Trajectory>,
    positions: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            capacity,
            trajectories: VecDeque::with_capacity(capacity),
            positions: 0,
        }
    }

    pub fn push(&mut self, traj: Trajectory) {
        if traj.is_empty() {
            return;
        }
        if self.trajectories.len() == self.capacity {
            let old = self.trajectories.pop_front().expect("full buffer");
            self.positions -= old.len();
        }
        self.positions += traj.len();
        self.trajectories.push_back(traj);
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Number of valid start states.
    pub fn positions(&self) -> usize {
        self.positions
    }

    /// A uniformly random start state, or `None` if the buffer is empty.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<(&Trajectory, usize)> {
        if self.positions == 0 {
            return None;
        }
        let mut i = rng.random_range(0..self.positions);
        for traj in &self.trajectories {
            if i < traj.len() {
                return Some((traj, i));
            }
            i -= traj.len();
        }
        unreachable!("position index within total")
    }
}
