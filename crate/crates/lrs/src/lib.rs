//! Low-rank plus sparse multi-task linear regression.
//!
//! Each task's parameter is θ⁽ⁱ⁾ = U w⁽ⁱ⁾ + b⁽ⁱ⁾ with U a shared d×r orthonormal basis and
//! b⁽ⁱ⁾ a k-sparse per-task correction. The crate provides the alternating solver, its
//! differentially private variant, the rank-1 fine-tuning special case, a moment-based
//! warm start, new-task adaptation, a planted-data generator and evaluation helpers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod amht;
pub mod datagen;
pub mod dp;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod numerics;
pub mod rank1;

pub use error::{LrsError, Result};
pub use model::{
    Batching, GroundTruth, ModelState, PrivacyConfig, SolverConfig, StepRule, TaskDataset,
};
