//! Planning loop in three modes: whole-subtree expansion with mean-variance
//! evaluation, one-node-per-simulation with the same evaluation, and
//! one-node-per-simulation with visit counts.

mod model;

use std::time::{Duration, Instant};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::networks::{build_causal_mask, build_tree_mask, Latent, NetworkError};
use crate::tree::{
    backup_depth_parallel, backup_path, mvc_policy, puct_select, q_backup, MvcParams, NodeId,
    SearchTree, TreeError, ROOT,
};

pub use model::{ChainModel, LatentModel};

/// Temperatures below this select the argmax.
pub const GREEDY_TEMPERATURE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("invalid planner config: {0}")]
    Config(String),
}

pub type Result<T, E = PlanError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerMode {
    ParallelMvc,
    SeqMvc,
    SeqCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub mode: PlannerMode,
    pub num_simulations: usize,
    /// Levels added per simulation in parallel mode.
    pub subtree_layers: usize,
    /// Action-selection temperature used by callers of [`act`].
    pub temperature: f64,
    pub mvc: MvcParams,
    pub dirichlet_alpha: f64,
    /// Share of the root prior replaced by Dirichlet noise; 0 disables it.
    pub noise_fraction: f64,
    /// Deepest node the tree may hold (also bounded by the model).
    pub max_tree_depth: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            mode: PlannerMode::ParallelMvc,
            num_simulations: 4,
            subtree_layers: 2,
            temperature: 1.0,
            mvc: MvcParams::default(),
            dirichlet_alpha: 0.3,
            noise_fraction: 0.25,
            max_tree_depth: 32,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(PlanError::Config(m));
        self.mvc.validate().map_err(PlanError::Config)?;
        if self.subtree_layers == 0 {
            return fail("subtree_layers must be >= 1".into());
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return fail(format!(
                "noise_fraction must be in [0, 1], got {}",
                self.noise_fraction
            ));
        }
        if self.noise_fraction > 0.0 && !(self.dirichlet_alpha > 0.0) {
            return fail(format!(
                "dirichlet_alpha must be > 0, got {}",
                self.dirichlet_alpha
            ));
        }
        if self.max_tree_depth == 0 {
            return fail("max_tree_depth must be >= 1".into());
        }
        Ok(())
    }

    /// Upper bound on tree size for one `plan` call.
    fn capacity(&self, num_actions: usize) -> usize {
        let per_sim = match self.mode {
            PlannerMode::ParallelMvc => (1..=self.subtree_layers as u32)
                .map(|k| num_actions.saturating_pow(k))
                .fold(0usize, usize::saturating_add),
            _ => 1,
        };
        per_sim
            .saturating_mul(self.num_simulations)
            .saturating_add(1)
    }
}

#[derive(Clone, Debug)]
pub struct PlanResult {
    /// Distribution over real actions at temperature 1.
    pub root_policy: Vec<f64>,
    pub root_value: f64,
    /// Non-root nodes created.
    pub nodes_expanded: usize,
    /// Simulations whose expansion was cut short by the depth limit.
    pub truncated_expansions: usize,
    pub wall_time: Duration,
    pub tree: SearchTree,
}

/// Runs `config.num_simulations` simulations from `observation`. `rng` is
/// only used for root noise.
pub fn plan<M: LatentModel + ?Sized, R: Rng + ?Sized>(
    observation: &[f64],
    model: &M,
    config: &PlannerConfig,
    rng: &mut R,
) -> Result<PlanResult> {
    config.validate()?;
    let start = Instant::now();
    let a = model.num_actions();
    let max_depth = config.max_tree_depth.min(model.max_depth());
    let (root_latent, root_pred) = model.root(observation)?;
    let mut tree = SearchTree::new(a, config.capacity(a));
    let prior = root_pred.prior.clone();
    tree.set_outputs(ROOT, root_pred, Some(root_latent.clone()));
    q_backup(&mut tree, ROOT, &config.mvc)?;

    if config.num_simulations == 0 {
        let value = tree.node(ROOT).value;
        return Ok(PlanResult {
            root_policy: prior,
            root_value: value,
            nodes_expanded: 0,
            truncated_expansions: 0,
            wall_time: start.elapsed(),
            tree,
        });
    }
    if config.noise_fraction > 0.0 && a > 1 {
        // Dirichlet sample as normalized Gamma draws
        let gamma = Gamma::new(config.dirichlet_alpha, 1.0)
            .map_err(|e| PlanError::Config(format!("dirichlet noise: {e}")))?;
        let draws: Vec<f64> = (0..a).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        let noise: Vec<f64> = if total > 0.0 {
            draws.iter().map(|d| d / total).collect()
        } else {
            vec![1.0 / a as f64; a]
        };
        let f = config.noise_fraction;
        let node = tree.node_mut(ROOT);
        for (p, n) in node.prior.iter_mut().zip(noise) {
            *p = (1.0 - f) * *p + f * n;
        }
    }

    let mut truncated = 0;
    let p = &config.mvc;
    match config.mode {
        PlannerMode::ParallelMvc => {
            for _ in 0..config.num_simulations {
                let leaf = descend(&tree, p);
                let room = max_depth - tree.node(leaf).depth;
                let layers = config.subtree_layers.min(room);
                if layers < config.subtree_layers {
                    truncated += 1;
                }
                if layers == 0 {
                    continue;
                }
                expand_parallel(&mut tree, leaf, layers, model)?;
                backup_depth_parallel(&mut tree, leaf, p)?;
            }
        }
        PlannerMode::SeqMvc => {
            // A node whose children are only partly expanded is finished
            // before anything else is selected.
            let mut pending: Option<NodeId> = None;
            for _ in 0..config.num_simulations {
                let node = match pending {
                    Some(n) => n,
                    None => descend(&tree, p),
                };
                if tree.node(node).depth >= max_depth {
                    truncated += 1;
                    pending = None;
                    continue;
                }
                let action = select_unexpanded(&tree, node);
                let child = expand_sequential(&mut tree, node, action, model)?;
                backup_path(&mut tree, child, p)?;
                pending = tree
                    .node(node)
                    .children
                    .iter()
                    .any(Option::is_none)
                    .then_some(node);
            }
        }
        PlannerMode::SeqCounts => {
            let mut bounds = MinMax::default();
            for _ in 0..config.num_simulations {
                let (path, action) = descend_counts(&tree, p, &bounds);
                let leaf = *path.last().expect("path holds the root");
                let mut path = path;
                let value = if tree.node(leaf).depth >= max_depth {
                    truncated += 1;
                    tree.node(leaf).value
                } else {
                    let child = expand_sequential(&mut tree, leaf, action, model)?;
                    q_backup(&mut tree, child, p)?;
                    path.push(child);
                    tree.node(child).value
                };
                backup_counts(&mut tree, &path, value, p.gamma, &mut bounds);
            }
        }
    }

    let (root_policy, root_value) = root_summary(&tree, config, &prior)?;
    Ok(PlanResult {
        root_policy,
        root_value,
        nodes_expanded: tree.len() - 1,
        truncated_expansions: truncated,
        wall_time: start.elapsed(),
        tree,
    })
}

fn root_summary(
    tree: &SearchTree,
    config: &PlannerConfig,
    prior: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let a = tree.num_actions();
    let root = tree.node(ROOT);
    match config.mode {
        PlannerMode::SeqCounts => {
            let counts: Vec<f64> = root
                .children
                .iter()
                .map(|c| c.map_or(0.0, |c| tree.node(c).visits as f64))
                .collect();
            let total: f64 = counts.iter().sum();
            if total == 0.0 {
                return Ok((prior.to_vec(), root.value));
            }
            let value = if root.visits > 0 {
                root.value_sum / root.visits as f64
            } else {
                root.value
            };
            Ok((counts.iter().map(|c| c / total).collect(), value))
        }
        _ => {
            let pi = mvc_policy(tree, ROOT, &config.mvc)?;
            // state value: the evaluation policy's mix of child Qs and v(root)
            let mut value = pi[a] * root.value;
            for (act, child) in root.children.iter().enumerate() {
                if let Some(c) = child {
                    value += pi[act] * tree.node(*c).q_value;
                }
            }
            let real: f64 = pi[..a].iter().sum();
            if real <= 0.0 {
                return Ok((prior.to_vec(), value));
            }
            Ok((pi[..a].iter().map(|x| x / real).collect(), value))
        }
    }
}

/// Follows the selection rule from the root to a node without children.
fn descend(tree: &SearchTree, params: &MvcParams) -> NodeId {
    let mut node = ROOT;
    while tree.has_children(node) {
        let a = puct_select(tree, node, params);
        match tree.node(node).children[a] {
            Some(c) => node = c,
            None => break,
        }
    }
    node
}

/// Among `node`'s missing children, the one the selection rule ranks first:
/// all of them score alike except for the prior, so this is the highest
/// prior, lowest action on ties.
fn select_unexpanded(tree: &SearchTree, node: NodeId) -> usize {
    let n = tree.node(node);
    let mut best: Option<usize> = None;
    for a in 0..tree.num_actions() {
        if n.children[a].is_none() && best.is_none_or(|b| n.prior[a] > n.prior[b]) {
            best = Some(a);
        }
    }
    best.expect("node has an unexpanded action")
}

/// Adds the full `layers`-deep subtree under `leaf` and fills every new node
/// from one dynamics pass over the root path plus the subtree, under the
/// ancestry mask. Returns the new node ids.
pub fn expand_parallel<M: LatentModel + ?Sized>(
    tree: &mut SearchTree,
    leaf: NodeId,
    layers: usize,
    model: &M,
) -> Result<Vec<NodeId>> {
    let root_latent = root_latent(tree)?;
    let new = tree.add_subtree_nodes(leaf, layers)?;
    let mut order = tree.path_to(leaf);
    let path_len = order.len();
    order.extend_from_slice(&new);
    let actions: Vec<usize> = order[1..]
        .iter()
        .map(|&n| tree.node(n).action.expect("non-root node"))
        .collect();
    let depths: Vec<usize> = order[1..].iter().map(|&n| tree.node(n).depth).collect();
    let mask = build_tree_mask(tree, &order)?;
    let latents = model.expand(&root_latent, &actions, &depths, &mask)?;
    let fresh = &latents[path_len..];
    let preds = model.predict_batch(fresh)?;
    for ((&id, latent), pred) in new.iter().zip(fresh).zip(preds) {
        tree.set_outputs(id, pred, Some(latent.clone()));
    }
    Ok(new)
}

/// Adds one child and computes its latent by re-running the dynamics over
/// its whole root path.
pub fn expand_sequential<M: LatentModel + ?Sized>(
    tree: &mut SearchTree,
    leaf: NodeId,
    action: usize,
    model: &M,
) -> Result<NodeId> {
    let root_latent = root_latent(tree)?;
    let child = tree.add_child(leaf, action)?;
    let actions = tree.path_actions(child);
    let depths: Vec<usize> = (1..=actions.len()).collect();
    let mask = build_causal_mask(actions.len() + 1)?;
    let mut latents = model.expand(&root_latent, &actions, &depths, &mask)?;
    let latent = latents.pop().expect("one latent per token");
    let pred = model
        .predict_batch(std::slice::from_ref(&latent))?
        .remove(0);
    tree.set_outputs(child, pred, Some(latent));
    Ok(child)
}

fn root_latent(tree: &SearchTree) -> Result<Latent> {
    tree.latent(ROOT)
        .cloned()
        .ok_or(PlanError::Tree(TreeError::MissingOutputs { node: ROOT }))
}

/// Rebuilds `template`'s node set one node per expansion, in id order, with
/// a path backup after each. Ids match the template's.
pub fn replay_sequential<M: LatentModel + ?Sized>(
    observation: &[f64],
    model: &M,
    params: &MvcParams,
    template: &SearchTree,
) -> Result<SearchTree> {
    let (root_latent, root_pred) = model.root(observation)?;
    let mut tree = SearchTree::new(model.num_actions(), template.len());
    tree.set_outputs(ROOT, root_pred, Some(root_latent));
    q_backup(&mut tree, ROOT, params)?;
    for id in 1..template.len() {
        let n = template.node(id);
        let parent = n.parent.expect("non-root node");
        let child = expand_sequential(&mut tree, parent, n.action.expect("non-root node"), model)?;
        debug_assert_eq!(child, id);
        backup_path(&mut tree, child, params)?;
    }
    Ok(tree)
}

/// Running Q range for the count-based planner.
#[derive(Clone, Copy, Debug)]
struct MinMax {
    lo: f64,
    hi: f64,
}

impl Default for MinMax {
    fn default() -> Self {
        Self {
            lo: f64::INFINITY,
            hi: f64::NEG_INFINITY,
        }
    }
}

impl MinMax {
    fn update(&mut self, v: f64) {
        self.lo = self.lo.min(v);
        self.hi = self.hi.max(v);
    }

    fn normalize(&self, v: f64) -> f64 {
        if self.hi > self.lo {
            (v - self.lo) / (self.hi - self.lo)
        } else {
            v
        }
    }
}

fn mean_value(tree: &SearchTree, id: NodeId) -> f64 {
    let n = tree.node(id);
    if n.visits == 0 {
        0.0
    } else {
        n.value_sum / n.visits as f64
    }
}

/// Visit-count descent: `Q̂(s,a) + c·p(s,a)·sqrt(Σ_b N(s,b)) / (1 + N(s,a))`.
/// Returns the path and the action whose child is missing at its end.
fn descend_counts(tree: &SearchTree, p: &MvcParams, bounds: &MinMax) -> (Vec<NodeId>, usize) {
    let mut path = vec![ROOT];
    loop {
        let id = *path.last().expect("non-empty");
        let n = tree.node(id);
        let total: u32 = n
            .children
            .iter()
            .flatten()
            .map(|&c| tree.node(c).visits)
            .sum();
        let sqrt_total = (total as f64).sqrt();
        let mut best = (0, f64::NEG_INFINITY);
        for a in 0..tree.num_actions() {
            let (q, visits) = match n.children[a] {
                Some(c) if tree.node(c).visits > 0 => {
                    let cn = tree.node(c);
                    (
                        bounds.normalize(cn.reward + p.gamma * mean_value(tree, c)),
                        cn.visits,
                    )
                }
                _ => (0.0, 0),
            };
            let score = q + p.c_puct * n.prior[a] * sqrt_total / (1.0 + visits as f64);
            if score > best.1 {
                best = (a, score);
            }
        }
        match n.children[best.0] {
            Some(c) => path.push(c),
            None => return (path, best.0),
        }
    }
}

fn backup_counts(
    tree: &mut SearchTree,
    path: &[NodeId],
    leaf_value: f64,
    gamma: f64,
    bounds: &mut MinMax,
) {
    let mut g = leaf_value;
    for &id in path.iter().rev() {
        let node = tree.node_mut(id);
        node.value_sum += g;
        node.visits += 1;
        let reward = node.reward;
        bounds.update(reward + gamma * mean_value(tree, id));
        g = reward + gamma * g;
    }
}

/// Samples an action from `policy` sharpened by `1/τ`; at or below
/// [`GREEDY_TEMPERATURE`] returns the argmax (lowest index on ties).
pub fn act<R: Rng + ?Sized>(policy: &[f64], temperature: f64, rng: &mut R) -> usize {
    assert!(temperature >= 0.0, "temperature must be >= 0");
    let argmax = || {
        policy
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| {
                if p > best.1 {
                    (i, p)
                } else {
                    best
                }
            })
            .0
    };
    if temperature < GREEDY_TEMPERATURE {
        return argmax();
    }
    let max = policy.iter().copied().fold(0.0, f64::max);
    let weights: Vec<f64> = policy
        .iter()
        .map(|&p| {
            if p > 0.0 {
                (p / max).powf(1.0 / temperature)
            } else {
                0.0
            }
        })
        .collect();
    match WeightedIndex::new(&weights) {
        Ok(dist) => dist.sample(rng),
        Err(_) => argmax(),
    }
}
