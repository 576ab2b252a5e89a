//! Experiment driver for the simulator: TOML configs, sweeps and result bundles.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod output;
pub mod run;

pub use config::ExperimentConfig;
pub use run::{run_command, PointResult};

/// Failure classes with stable exit codes: 2 for bad input, 3 for everything that breaks at run time.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config at `{key}`: {message}")]
    Validation { key: String, message: String },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn validation(key: &str, message: impl Into<String>) -> Self {
        Self::Validation { key: key.to_string(), message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self::Runtime(message.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation { .. } => 2,
            Self::Runtime(_) => 3,
        }
    }
}

impl From<fmpa_core::Error> for CliError {
    fn from(e: fmpa_core::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(format!("I/O error: {e}"))
    }
}
