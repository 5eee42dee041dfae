//! Desk-scale mixture-of-experts pruning toolkit.
//!
//! A tiny MoE transformer, gate-weighted calibration statistics, one-shot
//! pruning (magnitude, Wanda, SparseGPT and the router-weighted MoE-Pruner
//! metric) under unstructured or N:M sparsity, expert-wise knowledge
//! distillation, and expert load-balance analysis.

pub mod analysis;
pub mod autograd;
pub mod calibration;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod model;
pub mod numerics;
pub mod persistence;
pub mod pruning;
pub mod train;

pub use error::{Error, Result};
pub use model::{ExpertTarget, MoEModel, ModelConfig, Projection};
pub use numerics::{Matrix, SeededRng};
