//! Experiment harness around `attnprobe-core`: model generation, extraction
//! runs with JSON reports, replayable manifests and CSV sweeps.

pub mod demo;
pub mod error;
pub mod extract;
pub mod generate;
pub mod manifest;
pub mod model_io;
pub mod seeds;
pub mod sweep;

pub use error::{CliError, CliResult, ExitStatus};

/// Environment variable naming the default report directory.
pub const REPORT_DIR_ENV: &str = "ATTNPROBE_REPORT_DIR";
