//! Mean-variance node evaluation, backups and variance-aware selection.
//!
//! A node's statistics are `Q(x) = r(x) + γ Σ π(x,a) Q(x⊎a)` and
//! `V(x) = V_r + γ² Σ π(x,a)² V(x⊎a)`, summed over the evaluated children
//! plus a simulation action whose Q is the node's own value estimate and
//! whose variance is the value variance. A node without evaluated children
//! uses `Q = r + γ v`, `V = V_r + γ² V_v`.

use serde::{Deserialize, Serialize};

use super::{NodeId, Result, SearchTree, TreeError};

/// Lower bound applied to variances wherever they are inverted.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Q ranges narrower than this count as degenerate during normalization.
const RANGE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MvcParams {
    /// Weight on value against variance in the evaluation policy.
    pub beta: f64,
    pub c_puct: f64,
    pub gamma: f64,
    pub reward_variance: f64,
    pub value_variance: f64,
    /// Min-max normalize Q before it enters the policy and selection scores.
    pub normalize_q: bool,
}

impl Default for MvcParams {
    fn default() -> Self {
        Self {
            beta: 2.0,
            c_puct: 1.25,
            gamma: 0.97,
            reward_variance: 0.0,
            value_variance: 1.0,
            normalize_q: true,
        }
    }
}

impl MvcParams {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.beta > 0.0) {
            return Err(format!("beta must be > 0, got {}", self.beta));
        }
        if !(self.c_puct > 0.0) {
            return Err(format!("c_puct must be > 0, got {}", self.c_puct));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(format!("gamma must be in [0, 1], got {}", self.gamma));
        }
        if !(self.reward_variance >= 0.0) {
            return Err(format!(
                "reward_variance must be >= 0, got {}",
                self.reward_variance
            ));
        }
        if !(self.value_variance > 0.0) {
            return Err(format!(
                "value_variance must be > 0, got {}",
                self.value_variance
            ));
        }
        Ok(())
    }
}

/// Candidates of the extended action set: `(Q, V)` per evaluated real child,
/// plus the simulation action last.
fn candidates(
    tree: &SearchTree,
    id: NodeId,
    params: &MvcParams,
) -> Result<Vec<(Option<usize>, f64, f64)>> {
    let node = tree.node(id);
    let mut out = Vec::with_capacity(node.children.len() + 1);
    for (a, child) in node.children.iter().enumerate() {
        if let Some(c) = *child {
            let cn = tree.node(c);
            if !cn.evaluated {
                return Err(TreeError::MissingStatistics { node: id, child: c });
            }
            out.push((Some(a), cn.q_value, cn.variance));
        }
    }
    out.push((None, node.value, params.value_variance));
    Ok(out)
}

fn policy_from_candidates(
    cands: &[(Option<usize>, f64, f64)],
    num_actions: usize,
    params: &MvcParams,
) -> Vec<f64> {
    let mut policy = vec![0.0; num_actions + 1];
    if cands.len() == 1 {
        policy[num_actions] = 1.0;
        return policy;
    }
    let normalized: Vec<f64> = if params.normalize_q {
        let lo = cands.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        let hi = cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < RANGE_EPS {
            vec![0.0; cands.len()]
        } else {
            cands.iter().map(|c| (c.1 - lo) / (hi - lo)).collect()
        }
    } else {
        cands.iter().map(|c| c.1).collect()
    };
    // Work in log space: exp(βQ̂)/V overflows for large β.
    let logits: Vec<f64> = cands
        .iter()
        .zip(&normalized)
        .map(|(c, q)| params.beta * q - c.2.max(VARIANCE_FLOOR).ln())
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    for (c, w) in cands.iter().zip(&weights) {
        policy[c.0.unwrap_or(num_actions)] = w / total;
    }
    policy
}

/// Evaluation policy over the real actions followed by the simulation
/// action (index `num_actions`). Actions without an evaluated child get 0;
/// a node without children puts all mass on the simulation action.
///
/// Q values are min-max normalized over this node's own candidates.
pub fn mvc_policy(tree: &SearchTree, id: NodeId, params: &MvcParams) -> Result<Vec<f64>> {
    let cands = candidates(tree, id, params)?;
    Ok(policy_from_candidates(&cands, tree.num_actions(), params))
}

fn compute_stats(tree: &SearchTree, id: NodeId, params: &MvcParams) -> Result<(f64, f64)> {
    let node = tree.node(id);
    if !node.expanded {
        return Err(TreeError::MissingOutputs { node: id });
    }
    let cands = candidates(tree, id, params)?;
    let policy = policy_from_candidates(&cands, tree.num_actions(), params);
    let g = params.gamma;
    let mut q = 0.0;
    let mut v = 0.0;
    for &(a, cq, cv) in &cands {
        let p = policy[a.unwrap_or(tree.num_actions())];
        q += p * cq;
        v += p * p * cv;
    }
    Ok((node.reward + g * q, params.reward_variance + g * g * v))
}

/// Recomputes one node's Q and variance from its children and stores them.
pub fn q_backup(tree: &mut SearchTree, id: NodeId, params: &MvcParams) -> Result<(f64, f64)> {
    let (q, v) = compute_stats(tree, id, params)?;
    let node = tree.node_mut(id);
    node.q_value = q;
    node.variance = v;
    node.evaluated = true;
    Ok((q, v))
}

/// Backs up `from` and every ancestor, one node at a time.
pub fn backup_path(tree: &mut SearchTree, from: NodeId, params: &MvcParams) -> Result<()> {
    let mut cur = Some(from);
    while let Some(id) = cur {
        q_backup(tree, id, params)?;
        cur = tree.node(id).parent;
    }
    Ok(())
}

/// Backs up the subtree under `subtree_root` one depth level at a time,
/// deepest first, then the ancestors of `subtree_root`. Nodes at one level
/// only read statistics from the level below, so each level is computed as
/// a batch before any of it is written.
pub fn backup_depth_parallel(
    tree: &mut SearchTree,
    subtree_root: NodeId,
    params: &MvcParams,
) -> Result<()> {
    let mut levels = vec![vec![subtree_root]];
    loop {
        let next: Vec<NodeId> = levels
            .last()
            .expect("non-empty")
            .iter()
            .flat_map(|&n| tree.node(n).children.iter().flatten().copied())
            .collect();
        if next.is_empty() {
            break;
        }
        levels.push(next);
    }
    for level in levels.iter().rev() {
        let stats = level
            .iter()
            .map(|&n| compute_stats(tree, n, params))
            .collect::<Result<Vec<_>>>()?;
        for (&n, (q, v)) in level.iter().zip(stats) {
            let node = tree.node_mut(n);
            node.q_value = q;
            node.variance = v;
            node.evaluated = true;
        }
    }
    match tree.node(subtree_root).parent {
        Some(p) => backup_path(tree, p, params),
        None => Ok(()),
    }
}

/// Min and max Q over evaluated non-root nodes, or `None` if there are none.
fn tree_q_bounds(tree: &SearchTree) -> Option<(f64, f64)> {
    tree.nodes()
        .iter()
        .skip(1)
        .filter(|n| n.evaluated)
        .map(|n| n.q_value)
        .fold(None, |acc, q| match acc {
            None => Some((q, q)),
            Some((lo, hi)) => Some((lo.min(q), hi.max(q))),
        })
}

/// Descent rule over real actions:
/// `Q̂(x⊎a) + c·p(x,a)·sqrt(1/V(x)) / (1 + 1/V(x⊎a))`.
///
/// Q̂ is normalized by the tree-wide Q range. Children without statistics
/// score `Q̂ = 0.5` with `1/V = 0`. Ties go to the lowest action.
pub fn puct_select(tree: &SearchTree, id: NodeId, params: &MvcParams) -> usize {
    let node = tree.node(id);
    let bounds = if params.normalize_q {
        tree_q_bounds(tree)
    } else {
        None
    };
    let normalize = |q: f64| match bounds {
        Some((lo, hi)) if hi - lo >= RANGE_EPS => (q - lo) / (hi - lo),
        _ if params.normalize_q => 0.5,
        _ => q,
    };
    let unexplored = if params.normalize_q { 0.5 } else { 0.0 };
    let parent_precision = if node.evaluated {
        1.0 / node.variance.max(VARIANCE_FLOOR)
    } else {
        1.0 / params.value_variance
    };
    let explore = params.c_puct * parent_precision.sqrt();
    let mut best = (0, f64::NEG_INFINITY);
    for a in 0..tree.num_actions() {
        let (q_hat, child_precision) = match node.children[a].map(|c| tree.node(c)) {
            Some(c) if c.evaluated => (normalize(c.q_value), 1.0 / c.variance.max(VARIANCE_FLOOR)),
            _ => (unexplored, 0.0),
        };
        let score = q_hat + explore * node.prior[a] / (1.0 + child_precision);
        if score > best.1 {
            best = (a, score);
        }
    }
    best.0
}
