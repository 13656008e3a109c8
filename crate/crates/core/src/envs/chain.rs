use super::{EnvError, Environment, Step};

pub const BACK: usize = 0;
pub const ADVANCE: usize = 1;

/// Cells `0..n` in a row. Advancing from the last cell pays 1 and ends the
/// episode; backing up from cell 0 stays put. Episodes start at cell 0.
#[derive(Clone, Debug)]
pub struct ChainMdp {
    length: usize,
    step_limit: usize,
    pos: usize,
    steps: usize,
    done: bool,
}

impl ChainMdp {
    pub fn new(length: usize, step_limit: Option<usize>) -> Result<Self, EnvError> {
        if length == 0 {
            return Err(EnvError::Config("chain length must be >= 1".into()));
        }
        if step_limit == Some(0) {
            return Err(EnvError::Config("step_limit must be >= 1".into()));
        }
        Ok(Self {
            length,
            step_limit: step_limit.unwrap_or(4 * length),
            pos: 0,
            steps: 0,
            done: true,
        })
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Starts an episode at `cell`.
    pub fn reset_at(&mut self, cell: usize) -> Vec<f64> {
        assert!(cell < self.length);
        self.pos = cell;
        self.steps = 0;
        self.done = false;
        self.observation()
    }

    /// Optimal state values by value iteration, iterated to a fixed point.
    pub fn value_iteration(&self, gamma: f64) -> Vec<f64> {
        let n = self.length;
        let mut v = vec![0.0; n];
        loop {
            let mut next = vec![0.0; n];
            for i in 0..n {
                let advance = if i + 1 == n { 1.0 } else { gamma * v[i + 1] };
                let back = gamma * v[i.saturating_sub(1)];
                next[i] = advance.max(back);
            }
            if next == v {
                return v;
            }
            v = next;
        }
    }
}

impl Environment for ChainMdp {
    fn num_actions(&self) -> usize {
        2
    }

    fn obs_dim(&self) -> usize {
        self.length
    }

    fn step_limit(&self) -> usize {
        self.step_limit
    }

    fn reset(&mut self, _seed: u64) -> Result<Vec<f64>, EnvError> {
        Ok(self.reset_at(0))
    }

    fn step(&mut self, action: usize) -> Result<Step, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let mut reward = 0.0;
        match action {
            BACK => self.pos = self.pos.saturating_sub(1),
            ADVANCE if self.pos + 1 == self.length => {
                reward = 1.0;
                self.done = true;
            }
            ADVANCE => self.pos += 1,
            _ => {
                return Err(EnvError::Action {
                    action,
                    num_actions: 2,
                })
            }
        }
        self.steps += 1;
        if self.steps >= self.step_limit {
            self.done = true;
        }
        Ok(Step {
            observation: self.observation(),
            reward,
            done: self.done,
        })
    }

    fn observation(&self) -> Vec<f64> {
        let mut obs = vec![0.0; self.length];
        obs[self.pos] = 1.0;
        obs
    }

    fn is_done(&self) -> bool {
        self.done
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_are_discounted_distance_to_the_end() {
        for gamma in [0.5, 0.9, 0.99] {
            let chain = ChainMdp::new(7, None).unwrap();
            let v = chain.value_iteration(gamma);
            for (i, vi) in v.iter().enumerate() {
                assert!((vi - gamma.powi((6 - i) as i32)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn advancing_reaches_the_reward() {
        let mut c = ChainMdp::new(3, None).unwrap();
        c.reset(0).unwrap();
        assert_eq!(c.step(BACK).unwrap().reward, 0.0);
        assert_eq!(c.position(), 0);
        c.step(ADVANCE).unwrap();
        c.step(ADVANCE).unwrap();
        let s = c.step(ADVANCE).unwrap();
        assert_eq!((s.reward, s.done), (1.0, true));
        assert_eq!(c.step(ADVANCE), Err(EnvError::EpisodeOver));
    }
}
