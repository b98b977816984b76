//! Constrained text sampling by projected Langevin dynamics in the
//! embedding space of a small causal language model.
//!
//! The crate is organised bottom-up: [`autodiff`] provides a reverse-mode
//! tape, [`model`] the toy LM and constraint models that share one
//! embedding table, [`geometry`] projection and distance-softmax helpers,
//! [`constraint`] the energy and its Lagrange multipliers, [`sampler`] the
//! Langevin loop, and [`eval`] the metrics.

pub mod autodiff;
pub mod constraint;
pub mod error;
pub mod eval;
pub mod exec;
pub mod geometry;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod verify;

pub use error::{Error, Result};
