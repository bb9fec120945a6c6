//! Likelihood-free posterior sampling with estimated scores.
//!
//! The pipeline localizes the parameter with a sliced-Wasserstein simulated
//! method of moments, trains a score network on simulated reference tables,
//! and runs Langevin Monte Carlo driven by the learned score.

pub mod binfmt;
pub mod diffnet;
pub mod discrepancy;
pub mod error;
pub mod eval;
pub mod langevin;
pub mod localization;
pub mod pipeline;
pub mod rng;
pub mod scorematch;
pub mod simulators;

pub use error::{Error, Result};
