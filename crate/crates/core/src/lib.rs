//! Deep Bayesian Gaussian-process classification of clinical event sequences.
//!
//! The crate bundles a synthetic cohort generator, a small transformer
//! encoder with optional mean-field Bayesian embeddings, sparse and
//! structured Gaussian-process heads, variational training and the
//! uncertainty-aware evaluation metrics used to compare model variants.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod bayeslayers;
pub mod dbgp;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod gp;
pub mod linalg;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
