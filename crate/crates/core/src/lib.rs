//! Numerical engine for consumption-investment optimization under
//! Epstein-Zin stochastic differential utility in incomplete, possibly
//! non-Markovian markets.
//!
//! The pipeline: simulate market factor paths ([`market`]), solve the
//! characterizing quadratic BSDE by backward regression Monte Carlo
//! ([`bsde`]), form the candidate optimal consumption/portfolio controls and
//! evaluate recursive utilities ([`strategy`]), construct state price
//! densities and the duality gap ([`duality`]), and verify the martingale,
//! admissibility and model-condition claims by simulation ([`diagnostics`]).
//! [`report`] orchestrates experiments from JSON configs.
//!
//! See the crate `examples/` directory for one runnable program per
//! capability.

pub mod bsde;
pub mod diagnostics;
pub mod duality;
pub mod error;
pub mod market;
pub mod preferences;
pub mod regression;
pub mod report;
pub mod strategy;

pub use error::{Error, Result};
