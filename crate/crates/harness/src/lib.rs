//! Experiment harness for the harl library: run configuration, checkpoint and
//! data containers, the training and evaluation pipeline, the module ablation
//! and gradient checks. The `harl` binary wraps these.

// Negated comparisons are how inputs reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod datafile;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
