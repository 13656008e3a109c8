//! Flat, append-only search tree and its mean-variance statistics.

mod mvc;

use std::fmt::Write as _;

use thiserror::Error;

use crate::networks::{Latent, Prediction};

pub use mvc::{
    backup_depth_parallel, backup_path, mvc_policy, puct_select, q_backup, MvcParams,
    VARIANCE_FLOOR,
};

pub type NodeId = usize;

pub const ROOT: NodeId = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("tree capacity {capacity} exceeded: {needed} nodes needed")]
    Capacity { needed: usize, capacity: usize },
    #[error("node {node} already has a child for action {action}")]
    ChildExists { node: NodeId, action: usize },
    #[error("action {action} out of range for {num_actions} actions")]
    ActionOutOfRange { action: usize, num_actions: usize },
    #[error("node {node} has no network outputs")]
    MissingOutputs { node: NodeId },
    #[error("child {child} of node {node} has no statistics yet")]
    MissingStatistics { node: NodeId, child: NodeId },
    #[error("subtree needs at least one layer")]
    NoLayers,
}

pub type Result<T, E = TreeError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct SearchNode {
    pub parent: Option<NodeId>,
    pub action: Option<usize>,
    pub depth: usize,
    pub reward: f64,
    pub value: f64,
    pub prior: Vec<f64>,
    pub q_value: f64,
    pub variance: f64,
    pub children: Vec<Option<NodeId>>,
    /// Network outputs (reward, value, prior) are present.
    pub expanded: bool,
    /// `q_value` and `variance` have been computed at least once.
    pub evaluated: bool,
    /// Visit-count statistics, used only by the count-based planner.
    pub visits: u32,
    pub value_sum: f64,
}

impl SearchNode {
    fn new(
        parent: Option<NodeId>,
        action: Option<usize>,
        depth: usize,
        num_actions: usize,
    ) -> Self {
        Self {
            parent,
            action,
            depth,
            reward: 0.0,
            value: 0.0,
            prior: vec![1.0 / num_actions as f64; num_actions],
            q_value: 0.0,
            variance: 0.0,
            children: vec![None; num_actions],
            expanded: false,
            evaluated: false,
            visits: 0,
            value_sum: 0.0,
        }
    }
}

/// Nodes live in one vector and are never removed, so ids stay valid for
/// the life of the tree. Node 0 is the root.
#[derive(Clone, Debug)]
pub struct SearchTree {
    nodes: Vec<SearchNode>,
    latents: Vec<Option<Latent>>,
    by_depth: Vec<Vec<NodeId>>,
    num_actions: usize,
    capacity: usize,
}

impl SearchTree {
    pub fn new(num_actions: usize, capacity: usize) -> Self {
        assert!(num_actions > 0 && capacity > 0);
        Self {
            nodes: vec![SearchNode::new(None, None, 0, num_actions)],
            latents: vec![None],
            by_depth: vec![vec![ROOT]],
            num_actions,
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Raises the node limit by `extra`.
    pub fn grow_capacity(&mut self, extra: usize) {
        self.capacity += extra;
    }

    pub fn node(&self, id: NodeId) -> &SearchNode {
        &self.nodes[id]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut SearchNode {
        &mut self.nodes[id]
    }

    pub fn nodes(&self) -> &[SearchNode] {
        &self.nodes
    }

    pub fn latent(&self, id: NodeId) -> Option<&Latent> {
        self.latents[id].as_ref()
    }

    /// Node ids at `depth`, in creation order.
    pub fn depth_nodes(&self, depth: usize) -> &[NodeId] {
        self.by_depth.get(depth).map_or(&[], Vec::as_slice)
    }

    pub fn max_depth(&self) -> usize {
        self.by_depth.len() - 1
    }

    /// Child ids that carry statistics, with their actions.
    pub fn evaluated_children(&self, id: NodeId) -> impl Iterator<Item = (usize, NodeId)> + '_ {
        self.nodes[id]
            .children
            .iter()
            .enumerate()
            .filter_map(|(a, c)| c.filter(|&c| self.nodes[c].evaluated).map(|c| (a, c)))
    }

    pub fn has_children(&self, id: NodeId) -> bool {
        self.nodes[id].children.iter().any(Option::is_some)
    }

    /// Nodes from the root to `id`, inclusive.
    pub fn path_to(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Actions from the root to `id`.
    pub fn path_actions(&self, id: NodeId) -> Vec<usize> {
        self.path_to(id)
            .iter()
            .filter_map(|&n| self.nodes[n].action)
            .collect()
    }

    pub fn add_child(&mut self, parent: NodeId, action: usize) -> Result<NodeId> {
        if action >= self.num_actions {
            return Err(TreeError::ActionOutOfRange {
                action,
                num_actions: self.num_actions,
            });
        }
        if self.nodes[parent].children[action].is_some() {
            return Err(TreeError::ChildExists {
                node: parent,
                action,
            });
        }
        if self.nodes.len() >= self.capacity {
            return Err(TreeError::Capacity {
                needed: self.nodes.len() + 1,
                capacity: self.capacity,
            });
        }
        let id = self.nodes.len();
        let depth = self.nodes[parent].depth + 1;
        self.nodes.push(SearchNode::new(
            Some(parent),
            Some(action),
            depth,
            self.num_actions,
        ));
        self.latents.push(None);
        if self.by_depth.len() <= depth {
            self.by_depth.push(Vec::new());
        }
        self.by_depth[depth].push(id);
        self.nodes[parent].children[action] = Some(id);
        Ok(id)
    }

    /// Appends the complete `layers`-deep subtree under `root` in
    /// breadth-first order and returns the new ids, parents before children.
    pub fn add_subtree_nodes(&mut self, root: NodeId, layers: usize) -> Result<Vec<NodeId>> {
        if layers == 0 {
            return Err(TreeError::NoLayers);
        }
        let a = self.num_actions;
        let count: usize = (1..=layers as u32).map(|k| a.pow(k)).sum();
        if self.nodes.len() + count > self.capacity {
            return Err(TreeError::Capacity {
                needed: self.nodes.len() + count,
                capacity: self.capacity,
            });
        }
        if let Some(action) = self.nodes[root].children.iter().position(Option::is_some) {
            return Err(TreeError::ChildExists { node: root, action });
        }
        let mut added = Vec::with_capacity(count);
        let mut frontier = vec![root];
        for _ in 0..layers {
            let mut next = Vec::with_capacity(frontier.len() * a);
            for &node in &frontier {
                for action in 0..a {
                    next.push(self.add_child(node, action)?);
                }
            }
            added.extend_from_slice(&next);
            frontier = next;
        }
        Ok(added)
    }

    /// Stores network outputs for a node.
    pub fn set_outputs(&mut self, id: NodeId, prediction: Prediction, latent: Option<Latent>) {
        let node = &mut self.nodes[id];
        assert_eq!(prediction.prior.len(), self.num_actions, "prior length");
        node.reward = if id == ROOT { 0.0 } else { prediction.reward };
        node.value = prediction.value;
        node.prior = prediction.prior;
        node.expanded = true;
        self.latents[id] = latent;
    }

    /// One line per node: id, parent, action, depth, r, v, Q, V and the
    /// evaluation policy over real actions followed by the simulation action.
    pub fn dump(&self, params: &MvcParams) -> String {
        let mut out = String::from("id parent action depth r v q var policy\n");
        let opt = |v: Option<usize>| v.map_or("-".to_string(), |x| x.to_string());
        for (id, n) in self.nodes.iter().enumerate() {
            let policy = match mvc_policy(self, id, params) {
                Ok(p) => p
                    .iter()
                    .map(|x| format!("{x:.6}"))
                    .collect::<Vec<_>>()
                    .join(","),
                Err(_) => "-".into(),
            };
            writeln!(
                out,
                "{id} {} {} {} {:.6} {:.6} {:.6} {:.6} [{policy}]",
                opt(n.parent),
                opt(n.action),
                n.depth,
                n.reward,
                n.value,
                n.q_value,
                n.variance
            )
            .expect("writing to a String cannot fail");
        }
        out
    }
}
