//! Differentially private linear regression by sufficient-statistics
//! perturbation (AdaSSP) and its gradient-boosted variant, with Gaussian-DP
//! accounting, numerical checks of the mean-boosting theory, and a benchmark
//! harness.

pub mod bench;
pub mod boosting;
pub mod data;
pub mod error;
pub mod mechanisms;
pub mod privacy;
pub mod regression;
pub mod theory;

pub use error::{Error, Result};
