//! Particle solver for one-dimensional mean field games with common noise.

pub mod conditional;
pub mod config;
pub mod costs;
pub mod diagnostics;
pub mod error;
pub mod fbsde;
pub mod measures;
pub mod mfg;
pub mod paths;
mod rng;
pub mod runner;

pub use error::{MfgError, Result};
