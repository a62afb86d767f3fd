//! Neural estimators of multivariate dependency (total correlation,
//! f-mutual information, Wasserstein dependency) and their use as auxiliary
//! penalties when training multimodal fusion models.

// `!(x > 0.0)` is the NaN-rejecting form used throughout for validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bench;
pub mod data;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod fusion;
pub mod matrix;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
pub use matrix::Matrix;
