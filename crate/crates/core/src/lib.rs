//! Brownian directed polymer among space-time Poissonian disasters.
//!
//! Exact survival evaluation on path skeletons, sequential Monte Carlo
//! estimation of partition functions and free energies (including the
//! zero-temperature case), the renewal-based survival strategy, and the
//! dispersion functional of midpoint measures.

pub mod cli;
pub mod dispersion;
pub mod environment;
pub mod error;
pub mod estimators;
pub mod path_survival;
pub mod quadrature;
pub mod rng;
pub mod smc;
pub mod stats;
pub mod strategy;

pub use error::{Error, Result};
