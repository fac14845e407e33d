//! Supervised differentiable clustering as a regularizer for semi-supervised
//! learning and unsupervised domain adaptation.
//!
//! The crate is organized bottom-up:
//!
//! * [`adcore`]: reverse-mode differentiation tape over dense `f64` tensors.
//! * [`nn`]: MLP backbones, optimizers, schedules, weight averaging, checkpoints.
//! * [`cm`]: the clustering module head and its four-term loss.
//! * [`supercm`]: labeled centroid tracking and the combined objective.
//! * [`ssl`], [`uda`]: base regularizers the clustering loss is paired with.
//! * [`data`], [`eval`]: datasets, splits, batching, metrics, projections.
#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN.

pub mod adcore;
pub mod cm;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod ssl;
pub mod supercm;
pub mod uda;

pub use adcore::{Tape, Tensor, Var};
pub use error::{Error, Result};
pub use rng::StreamKey;
