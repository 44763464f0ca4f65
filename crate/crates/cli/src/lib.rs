//! Batch driver for the emednext pipeline: `preprocess`, `infer`,
//! `postprocess` and `evaluate` over a directory of cases, plus `pipeline`
//! which chains them.
//!
//! Failures are per case: a failed case is logged to the manifest and the run
//! continues. Only configuration problems (bad config, unreadable models,
//! missing input directory) stop a run.

pub mod config;
pub mod manifest;
mod stages;

pub use config::{EnsembleConfig, PipelineConfig};
pub use stages::{discover_cases, Outcome, Runner};

/// Run-fatal problem; maps to exit code 2.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("configuration error: {0}")]
pub struct ConfigError(pub String);

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
