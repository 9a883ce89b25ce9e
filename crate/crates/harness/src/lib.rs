//! Experiment pipelines around `advobs-core`: dataset and model artifacts,
//! paired trial matrices, the sweep / ablation / detectability tables and
//! the `advobs` command line.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod pipeline;
pub mod report;

pub use config::{ExperimentConfig, Scenario, Seeds};
pub use error::{ConfigError, HarnessError, Result};
