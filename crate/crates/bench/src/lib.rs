//! Config-driven experiment runner for the bilevel laboratory: single runs,
//! grid sweeps, lower-bound campaigns and trace reports.

// `!(a > b)` guards are written that way so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod instances;
pub mod output;
pub mod runner;

use thiserror::Error;

pub use config::ExperimentConfig;
pub use runner::{report, run_experiment, sweep, verify_lower_bounds, Overrides};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl BenchError {
    /// 1 for configuration problems, 2 for numeric or I/O failures, 3 for
    /// failed verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) => 1,
            BenchError::Numeric(_) | BenchError::Io(_) => 2,
            BenchError::Verification(_) => 3,
        }
    }
}
