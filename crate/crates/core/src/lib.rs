//! Simple recurrent networks trained with a minibatch gate on gradient-norm
//! decay.
//!
//! The crate computes, for every candidate minibatch, the first-order change
//! `dS` that the resulting recurrent-weight update would cause in the squared
//! norm of the deepest backpropagated delta, together with the Q-factor
//! `log₁₀(‖δ(T)‖ / ‖δ(T-h)‖)`. Minibatches whose update would push the
//! gradient norm the wrong way are skipped.
//!
//! - [`linalg`]: dense row-vector linear algebra
//! - [`model`]: the network, its forward pass, losses and model files
//! - [`bptt`]: truncated backpropagation through time
//! - [`regularizer`]: `g`, `dg`, `dS`, Q-factor and the minibatch gate
//! - [`tasks`]: adding, multiplication and temporal-order benchmarks
//! - [`trainer`]: momentum SGD with the gate in the loop
//! - [`diagnostics`]: gradient-norm depth profiles and training dynamics
//! - [`config`]: run configuration shared by the `srn` binary

pub mod bptt;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod model;
pub mod regularizer;
pub mod tasks;
pub mod trainer;

pub use error::{Result, SrnError};
