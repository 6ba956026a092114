//! Stochasticity-controlled diffusion bridges.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedule`]: transition-kernel schedules `(alpha, beta, gamma)`, the
//!   induced linear SDE coefficients, epsilon policies and time grids.
//! - [`dynamics`]: forward pinned-process and reverse sampling SDE
//!   simulation, with Monte Carlo moment estimation.
//! - [`denoiser`]: the `x0`-predictor abstraction, score reparameterisation,
//!   analytic Gaussian/GMM oracles, preconditioning and a small MLP trained
//!   with hand-written backprop.
//! - [`sampler`]: the stochastic bridge sampler and its four discretisations.
//! - [`metrics`]: AFD, MSE, energy distance and convergence-order regression.
//! - [`cli`]: the experiment runner behind the `sdb` binary.

// `!(x > 0.0)` guards reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::large_enum_variant)]

pub mod cli;
pub mod denoiser;
pub mod dynamics;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
pub use rng::NoiseStream;
