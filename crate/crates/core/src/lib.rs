//! Gaussian process neuron (GPN) networks.
//!
//! Every unit of a GPN layer carries a Gaussian-process prior over its
//! activation function, parameterized by a small set of virtual
//! observations. Means, variances and covariances are propagated through the
//! network in closed form, which yields deterministic training objectives for
//! both maximum-likelihood and variational training.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gp;
pub mod kernels;
pub mod linalg;
pub mod network;
pub mod objectives;
mod propagation;
pub mod seed;
pub mod training;
pub mod verify;

pub use error::{GpnError, Result};
pub use propagation::ParamKind;
