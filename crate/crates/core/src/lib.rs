//! Gradient-based task affinity for multi-task learning.
//!
//! A shared-encoder network is trained on a masked multi-task panel while
//! per-task encoder gradients are compared by cosine similarity. The
//! resulting matrix is checked against designed and empirical task
//! relationships, and the dependence of that agreement on the sample
//! overlap between tasks is measured.

pub mod cluster;
pub mod conflict;
pub mod experiments;
pub mod matrix;
pub mod nnet;
pub mod paneldata;
pub mod stats;

pub use matrix::{MatrixKind, PairwiseMatrix};
