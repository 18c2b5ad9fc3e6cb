//! Command-line harness: run configuration, training loop, checkpoints, evaluation,
//! prediction export and the gradient-check suite.

// `!(x > 0.0)` is how NaN gets rejected along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod trainer;

pub use error::{CliError, CliResult};
