use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvError, Environment, Step};

pub const TURN_LEFT: usize = 0;
pub const TURN_RIGHT: usize = 1;
pub const FORWARD: usize = 2;

const MAX_RESETS: usize = 1000;

/// Facing direction, clockwise from north.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Orientation {
    North,
    East,
    South,
    West,
}

impl Orientation {
    pub const ALL: [Orientation; 4] = [Self::North, Self::East, Self::South, Self::West];

    pub fn index(self) -> usize {
        self as usize
    }

    fn from_index(i: usize) -> Self {
        Self::ALL[i % 4]
    }

    fn left(self) -> Self {
        Self::from_index(self.index() + 3)
    }

    fn right(self) -> Self {
        Self::from_index(self.index() + 1)
    }

    fn glyph(self) -> char {
        ['^', '>', 'v', '<'][self.index()]
    }

    fn from_glyph(c: char) -> Option<Self> {
        ['^', '>', 'v', '<']
            .iter()
            .position(|&g| g == c)
            .map(Self::from_index)
    }
}

/// Static grid contents plus the agent's pose. The goal is always the
/// bottom-right cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub size: usize,
    /// Row-major lava flags.
    pub lava: Vec<bool>,
    pub agent: (usize, usize),
    pub orientation: Orientation,
}

impl Layout {
    pub fn goal(&self) -> (usize, usize) {
        (self.size - 1, self.size - 1)
    }

    pub fn is_lava(&self, cell: (usize, usize)) -> bool {
        self.lava[cell.0 * self.size + cell.1]
    }

    pub fn lava_count(&self) -> usize {
        self.lava.iter().filter(|&&l| l).count()
    }

    /// Cell in front of `cell` when facing `o`, or `None` at a wall.
    fn ahead(&self, cell: (usize, usize), o: Orientation) -> Option<(usize, usize)> {
        let (r, c) = cell;
        let n = self.size;
        match o {
            Orientation::North if r > 0 => Some((r - 1, c)),
            Orientation::East if c + 1 < n => Some((r, c + 1)),
            Orientation::South if r + 1 < n => Some((r + 1, c)),
            Orientation::West if c > 0 => Some((r, c - 1)),
            _ => None,
        }
    }

    /// Plain-text grid: `.` floor, `L` lava, `G` goal, `^ > v <` agent.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in 0..self.size {
            for c in 0..self.size {
                let ch = if (r, c) == self.agent {
                    self.orientation.glyph()
                } else if (r, c) == self.goal() {
                    'G'
                } else if self.is_lava((r, c)) {
                    'L'
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, EnvError> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect();
        let n = rows.len();
        if n < 2 {
            return Err(EnvError::Layout("grid needs at least 2 rows".into()));
        }
        let mut lava = vec![false; n * n];
        let mut agent = None;
        let mut goal = None;
        for (r, row) in rows.iter().enumerate() {
            let cells: Vec<char> = row.chars().collect();
            if cells.len() != n {
                return Err(EnvError::Layout(format!(
                    "row {} has {} cells, expected {n}",
                    r + 1,
                    cells.len()
                )));
            }
            for (c, ch) in cells.into_iter().enumerate() {
                match ch {
                    '.' => {}
                    'L' => lava[r * n + c] = true,
                    'G' => goal = Some((r, c)),
                    other => match Orientation::from_glyph(other) {
                        Some(o) if agent.is_none() => agent = Some(((r, c), o)),
                        Some(_) => return Err(EnvError::Layout("more than one agent".into())),
                        None => {
                            return Err(EnvError::Layout(format!(
                                "unknown cell `{other}` at row {}",
                                r + 1
                            )))
                        }
                    },
                }
            }
        }
        if goal != Some((n - 1, n - 1)) {
            return Err(EnvError::Layout(
                "goal must be the bottom-right cell".into(),
            ));
        }
        let (agent, orientation) = agent.ok_or_else(|| EnvError::Layout("no agent".into()))?;
        Ok(Self {
            size: n,
            lava,
            agent,
            orientation,
        })
    }
}

/// Fewest actions (turns count) from the agent's pose to the goal, by BFS
/// over (cell, orientation) states that avoid lava.
pub fn optimal_steps(layout: &Layout) -> Result<usize, EnvError> {
    let n = layout.size;
    let key = |cell: (usize, usize), o: Orientation| (cell.0 * n + cell.1) * 4 + o.index();
    let mut dist = vec![usize::MAX; n * n * 4];
    let mut queue = VecDeque::new();
    dist[key(layout.agent, layout.orientation)] = 0;
    queue.push_back((layout.agent, layout.orientation));
    while let Some((cell, o)) = queue.pop_front() {
        let d = dist[key(cell, o)];
        if cell == layout.goal() {
            return Ok(d);
        }
        let mut next = vec![(cell, o.left()), (cell, o.right())];
        if let Some(ahead) = layout.ahead(cell, o) {
            if !layout.is_lava(ahead) {
                next.push((ahead, o));
            }
        }
        for (c2, o2) in next {
            let k = key(c2, o2);
            if dist[k] == usize::MAX {
                dist[k] = d + 1;
                queue.push_back((c2, o2));
            }
        }
    }
    Err(EnvError::Unreachable)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridSpec {
    pub size: usize,
    pub lava: usize,
    /// Episode length cap; `None` means `4·size²`.
    pub step_limit: Option<usize>,
}

/// N×N lava world. Actions: 0 turn left, 1 turn right, 2 forward.
#[derive(Clone, Debug)]
pub struct GridWorld {
    spec: GridSpec,
    layout: Layout,
    optimal: usize,
    steps: usize,
    done: bool,
}

impl GridWorld {
    pub fn new(spec: GridSpec) -> Result<Self, EnvError> {
        if spec.size < 2 {
            return Err(EnvError::Config(format!(
                "grid size must be >= 2, got {}",
                spec.size
            )));
        }
        // goal and agent need two free cells
        if spec.lava + 2 > spec.size * spec.size {
            return Err(EnvError::Config(format!(
                "{} lava cells do not fit a {}x{} grid",
                spec.lava, spec.size, spec.size
            )));
        }
        if spec.step_limit == Some(0) {
            return Err(EnvError::Config("step_limit must be >= 1".into()));
        }
        let n = spec.size;
        Ok(Self {
            layout: Layout {
                size: n,
                lava: vec![false; n * n],
                agent: (0, 0),
                orientation: Orientation::East,
            },
            spec,
            optimal: 1,
            steps: 0,
            done: true,
        })
    }

    /// Starts an episode from a fixed layout.
    pub fn with_layout(layout: Layout, step_limit: Option<usize>) -> Result<Self, EnvError> {
        let optimal = optimal_steps(&layout)?;
        Ok(Self {
            spec: GridSpec {
                size: layout.size,
                lava: layout.lava_count(),
                step_limit,
            },
            layout,
            optimal,
            steps: 0,
            done: false,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn optimal_steps(&self) -> usize {
        self.optimal
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }
}

impl Environment for GridWorld {
    fn num_actions(&self) -> usize {
        3
    }

    fn obs_dim(&self) -> usize {
        6 * self.spec.size * self.spec.size
    }

    fn step_limit(&self) -> usize {
        self.spec
            .step_limit
            .unwrap_or(4 * self.spec.size * self.spec.size)
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>, EnvError> {
        let n = self.spec.size;
        let goal = n * n - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..MAX_RESETS {
            // lava and agent drawn together from the non-goal cells
            let cells = sample(&mut rng, goal, self.spec.lava + 1);
            let mut lava = vec![false; n * n];
            for idx in cells.iter().take(self.spec.lava) {
                lava[idx] = true;
            }
            let agent = cells.index(self.spec.lava);
            let layout = Layout {
                size: n,
                lava,
                agent: (agent / n, agent % n),
                orientation: Orientation::from_index(rng.random_range(0..4)),
            };
            if let Ok(opt) = optimal_steps(&layout) {
                self.layout = layout;
                self.optimal = opt;
                self.steps = 0;
                self.done = false;
                return Ok(self.observation());
            }
        }
        Err(EnvError::Config(format!(
            "no connected {n}x{n} layout with {} lava cells after {MAX_RESETS} attempts",
            self.spec.lava
        )))
    }

    fn step(&mut self, action: usize) -> Result<Step, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        if action >= 3 {
            return Err(EnvError::Action {
                action,
                num_actions: 3,
            });
        }
        self.steps += 1;
        let l = &mut self.layout;
        let mut reward = 0.0;
        match action {
            TURN_LEFT => l.orientation = l.orientation.left(),
            TURN_RIGHT => l.orientation = l.orientation.right(),
            _ => {
                if let Some(ahead) = l.ahead(l.agent, l.orientation) {
                    l.agent = ahead;
                    if l.is_lava(ahead) {
                        self.done = true;
                    } else if ahead == l.goal() {
                        self.done = true;
                        reward = 5.0 + 5.0 * self.optimal as f64 / self.steps as f64;
                    }
                }
            }
        }
        if self.steps >= self.step_limit() {
            self.done = true;
        }
        Ok(Step {
            observation: self.observation(),
            reward,
            done: self.done,
        })
    }

    /// Six one-hot planes of `size²`: the agent cell in the plane of its
    /// orientation (four planes), lava, goal.
    fn observation(&self) -> Vec<f64> {
        let n2 = self.spec.size * self.spec.size;
        let l = &self.layout;
        let mut obs = vec![0.0; 6 * n2];
        let agent = l.agent.0 * l.size + l.agent.1;
        obs[l.orientation.index() * n2 + agent] = 1.0;
        for (i, &lava) in l.lava.iter().enumerate() {
            if lava {
                obs[4 * n2 + i] = 1.0;
            }
        }
        obs[5 * n2 + n2 - 1] = 1.0;
        obs
    }

    fn is_done(&self) -> bool {
        self.done
    }

    fn describe(&self) -> String {
        let mut s = self.layout.to_text();
        let _ = write!(s, "optimal steps: {}", self.optimal);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(text: &str) -> Layout {
        Layout::from_text(text).unwrap()
    }

    #[test]
    fn optimal_steps_examples() {
        assert_eq!(optimal_steps(&layout("...\n...\n.>G")).unwrap(), 1);
        assert_eq!(optimal_steps(&layout("...\n...\n.<G")).unwrap(), 3);
        assert_eq!(optimal_steps(&layout(">..\n..L\n.LG")).ok(), None);
        // around a lava cell: right, forward, forward (turn) down, down
        assert_eq!(optimal_steps(&layout(">..\n.L.\n..G")).unwrap(), 5);
    }

    #[test]
    fn reset_is_deterministic_and_respects_counts() {
        let mut env = GridWorld::new(GridSpec {
            size: 3,
            lava: 2,
            step_limit: None,
        })
        .unwrap();
        let a = env.reset(42).unwrap();
        let la = env.layout().clone();
        let b = env.reset(42).unwrap();
        assert_eq!(a, b);
        assert_eq!(&la, env.layout());
        assert_eq!(la.lava_count(), 2);
        assert!(!la.is_lava(la.goal()));
        assert!(!la.is_lava(la.agent));
        assert_ne!(la.agent, la.goal());
        assert_eq!(a.len(), 54);
        assert_eq!(a.iter().sum::<f64>(), 4.0);
        assert_eq!(env.step_limit(), 36);
    }

    #[test]
    fn every_reset_is_connected() {
        for (size, lava) in [(3, 2), (5, 3)] {
            let mut env = GridWorld::new(GridSpec {
                size,
                lava,
                step_limit: None,
            })
            .unwrap();
            for seed in 0..10_000 {
                env.reset(seed).unwrap();
                assert!(optimal_steps(env.layout()).is_ok());
            }
        }
    }

    #[test]
    fn rewards_scale_with_efficiency() {
        let l = layout("...\n...\n.>G");
        let mut env = GridWorld::with_layout(l.clone(), None).unwrap();
        let s = env.step(FORWARD).unwrap();
        assert_eq!((s.reward, s.done), (10.0, true));
        assert_eq!(env.step(FORWARD), Err(EnvError::EpisodeOver));

        // optimal 1, taken 3
        let mut env = GridWorld::with_layout(layout("...\n..v\n..G"), None).unwrap();
        assert_eq!(env.optimal_steps(), 1);
        env.step(TURN_LEFT).unwrap();
        env.step(TURN_RIGHT).unwrap();
        let s = env.step(FORWARD).unwrap();
        assert!((s.reward - (5.0 + 5.0 / 3.0)).abs() < 1e-12);

        let mut env = GridWorld::with_layout(layout(">L.\n...\n..G"), None).unwrap();
        let s = env.step(FORWARD).unwrap();
        assert_eq!((s.reward, s.done), (0.0, true));
    }

    #[test]
    fn twice_optimal_gives_seven_and_a_half() {
        // optimal is 2 (turn, forward); take 4
        let mut env = GridWorld::with_layout(layout("...\n..>\n..G"), None).unwrap();
        assert_eq!(env.optimal_steps(), 2);
        for a in [TURN_LEFT, TURN_RIGHT, TURN_RIGHT, FORWARD] {
            env.step(a).unwrap();
        }
        assert_eq!(env.steps_taken(), 4);
        assert!(env.is_done());
        let mut env = GridWorld::with_layout(layout("...\n..>\n..G"), None).unwrap();
        for a in [TURN_LEFT, TURN_RIGHT, TURN_RIGHT] {
            assert_eq!(env.step(a).unwrap().reward, 0.0);
        }
        assert_eq!(env.step(FORWARD).unwrap().reward, 7.5);
    }

    #[test]
    fn wall_bump_is_a_no_op_and_limit_ends_episode() {
        let mut env = GridWorld::with_layout(layout("^..\n...\n..G"), Some(2)).unwrap();
        let before = env.observation();
        let s = env.step(FORWARD).unwrap();
        assert_eq!(s.observation, before);
        assert!(!s.done);
        let s = env.step(FORWARD).unwrap();
        assert_eq!((s.reward, s.done), (0.0, true));
    }

    #[test]
    fn text_round_trip() {
        let text = ">.L\n.L.\n..G\n";
        assert_eq!(layout(text).to_text(), text);
        assert!(Layout::from_text("..\n.G").is_err());
        assert!(Layout::from_text(">.\nG.").is_err());
        assert!(Layout::from_text(">x\n.G").is_err());
    }

    #[test]
    fn impossible_config_is_rejected() {
        assert!(GridWorld::new(GridSpec {
            size: 2,
            lava: 3,
            step_limit: None
        })
        .is_err());
        assert!(GridWorld::new(GridSpec {
            size: 3,
            lava: 1,
            step_limit: Some(0)
        })
        .is_err());
    }
}
