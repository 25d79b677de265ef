//! Experiment tooling around `krecon`: file formats, INI configs, and the
//! pipelines behind the `krecon` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod matrix_file;
pub mod model_file;

pub use error::{CliError, CliResult};
