//! Streaming non-exhaustive classification with a Dirichlet-process Gaussian
//! mixture.
//!
//! Records are featurized ([`records`]), embedded in a low-dimensional
//! non-negative space ([`nnmf`]), and classified one at a time into known or
//! newly discovered classes ([`dpgmm`]) by either a one-pass Gibbs sampler
//! ([`gibbs`]) or a particle filter ([`particle`]). Uncertain records can be
//! routed to a human ([`active`]); [`eval`] scores runs and drives
//! experiments.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod active;
pub mod dpgmm;
pub mod error;
pub mod eval;
pub mod gibbs;
pub mod linalg;
pub mod nnmf;
pub mod particle;
pub mod pipeline;
pub mod prob;
pub mod records;
pub mod rng;
mod serde_mat;
pub mod session;

pub use error::{Error, Result};
