//! Proximal mediation analysis: the population intervention indirect
//! effect (PIIE) of a binary exposure through a mediator when the
//! exposure-mediator-outcome relations share unmeasured confounding,
//! identified through a pair of proxies.
//!
//! The crate provides parametric bridge fitting, the outcome-regression,
//! hybrid, weighting and multiply robust estimators, a cross-fitted kernel
//! minimax estimator, a simulation lab and a command line front end.

pub mod bridge;
pub mod cli;
pub mod data;
pub mod dml;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
