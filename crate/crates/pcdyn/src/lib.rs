//! Command-line driver for the charged-particle dynamics core: scenario
//! files, the trajectory CSV format, JSON summaries and the subcommands.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod csv;
pub mod exit;
pub mod run;

use std::path::PathBuf;

pub use config::{ConfigError, ModelKind, Overrides, Scenario, ScenarioConfig};

/// Anything that stops a command before it can report.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::CsvError),
    #[error(transparent)]
    Core(#[from] pcdyn_core::Error),
    #[error("{0}")]
    Other(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => exit::CONFIG,
            _ => exit::ERROR,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Failure {
        let path = path.into();
        move |source| Failure::Io { path, source }
    }
}
