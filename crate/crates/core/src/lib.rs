//! Model-based planning with parallel subtree expansion.
//!
//! A transformer dynamics model turns a whole search subtree into one token
//! sequence: an ancestry attention mask lets every node see only its own root
//! path, so one forward pass yields the latent of every new node. Node
//! statistics come from a mean-variance evaluator instead of visit counts,
//! which makes same-depth backups independent of one another.

pub mod bench;
pub mod envs;
pub mod networks;
pub mod planner;
pub mod tensor;
pub mod training;
pub mod tree;
