//! Attention masks for unrolls (causal) and search trees (ancestry).

use std::sync::Arc;

use super::NetworkError;
use crate::tensor::Mask;
use crate::tree::{NodeId, SearchTree};

/// Square attention mask that is the reflexive-transitive ancestor relation
/// of a forest rooted at token 0. Every token attends to itself and to the
/// root token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    inner: Arc<Mask>,
}

impl AttentionMask {
    /// Validates `mask` against the ancestry invariants.
    pub fn new(mask: Mask) -> Result<Self, NetworkError> {
        let n = mask.rows();
        if mask.cols() != n || n == 0 {
            return Err(NetworkError::Mask(format!(
                "mask must be square and non-empty, got {}x{}",
                mask.rows(),
                mask.cols()
            )));
        }
        for i in 0..n {
            if !mask.allowed(i, i) {
                return Err(NetworkError::Mask(format!(
                    "token {i} cannot attend to itself"
                )));
            }
            if !mask.allowed(i, 0) {
                return Err(NetworkError::Mask(format!(
                    "token {i} cannot attend to the root"
                )));
            }
            if let Some(j) = (i + 1..n).find(|&j| mask.allowed(i, j)) {
                return Err(NetworkError::Mask(format!(
                    "token {i} attends to later token {j}"
                )));
            }
            if i == 0 {
                continue;
            }
            // The closest allowed predecessor is the parent; i must see exactly
            // the parent's set plus itself.
            let parent = (0..i).rev().find(|&j| mask.allowed(i, j)).unwrap_or(0);
            for j in 0..i {
                if mask.allowed(i, j) != mask.allowed(parent, j) {
                    return Err(NetworkError::Mask(format!(
                        "row {i} is not its parent's ancestry plus itself (column {j})"
                    )));
                }
            }
        }
        Ok(Self {
            inner: Arc::new(mask),
        })
    }

    pub fn len(&self) -> usize {
        self.inner.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.rows() == 0
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.inner.allowed(i, j)
    }

    pub fn as_mask(&self) -> &Mask {
        &self.inner
    }

    pub(crate) fn shared(&self) -> Arc<Mask> {
        Arc::clone(&self.inner)
    }

    /// Parent token of each token (`None` for the root).
    pub fn parents(&self) -> Vec<Option<usize>> {
        (0..self.len())
            .map(|i| (0..i).rev().find(|&j| self.allowed(i, j)))
            .collect()
    }
}

/// Lower-triangular mask: token `i` sees tokens `0..=i`.
pub fn build_causal_mask(n: usize) -> Result<AttentionMask, NetworkError> {
    if n == 0 {
        return Err(NetworkError::Mask("causal mask needs n >= 1".into()));
    }
    Ok(AttentionMask {
        inner: Arc::new(Mask::from_fn(n, n, |i, j| j <= i)),
    })
}

/// Mask over `node_ids` where each token sees itself and its ancestors.
/// `node_ids[0]` is the root token; every other node's parent must appear
/// earlier in the list.
pub fn build_tree_mask(
    tree: &SearchTree,
    node_ids: &[NodeId],
) -> Result<AttentionMask, NetworkError> {
    let parents: Vec<Option<NodeId>> = node_ids.iter().map(|&id| tree.node(id).parent).collect();
    let mut position = std::collections::HashMap::with_capacity(node_ids.len());
    let mut local_parent = Vec::with_capacity(node_ids.len());
    for (i, &id) in node_ids.iter().enumerate() {
        if i > 0 {
            let p = parents[i]
                .and_then(|p| position.get(&p).copied())
                .ok_or_else(|| {
                    NetworkError::Mask(format!(
                        "node {id} at position {i} has no parent earlier in the sequence"
                    ))
                })?;
            local_parent.push(Some(p));
        } else {
            local_parent.push(None);
        }
        position.insert(id, i);
    }
    mask_from_parents(&local_parent)
}

/// Ancestry mask from parent positions. Only position 0 may lack a parent,
/// and every parent must precede its child.
pub fn mask_from_parents(parents: &[Option<usize>]) -> Result<AttentionMask, NetworkError> {
    let n = parents.len();
    if n == 0 {
        return Err(NetworkError::Mask("empty token sequence".into()));
    }
    let mut allow = vec![false; n * n];
    for i in 0..n {
        allow[i * n + i] = true;
        match parents[i] {
            None if i == 0 => {}
            Some(p) if p < i => {}
            other => {
                return Err(NetworkError::Mask(format!(
                    "token {i} has parent {other:?}; parents must precede children"
                )))
            }
        }
        if let Some(p) = parents[i] {
            for j in 0..=p {
                allow[i * n + j] = allow[p * n + j];
            }
        }
    }
    Ok(AttentionMask {
        inner: Arc::new(Mask::new(n, n, allow)?),
    })
}
