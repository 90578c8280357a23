//! Stochastic exponential integrator for the 2D TM stochastic Maxwell
//! equations on a staggered Yee grid, with Euler-Maruyama baselines and
//! Monte Carlo harnesses for strong convergence, the energy trace formula
//! and averaged-divergence preservation.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod noise;
pub mod propagator;
pub mod schemes;

pub use error::{Error, Result};
