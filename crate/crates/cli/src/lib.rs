//! Library surface of the pipeline CLI: config parsing, stage commands and
//! the run manifest. The binary in `main.rs` is a thin argument mapper.

pub mod commands;
pub mod config;
pub mod manifest;

use thiserror::Error;

/// Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numeric
/// failure; 1 for anything else.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact '{artifact}': run `skelact {produce_with}` first")]
    MissingArtifact {
        artifact: String,
        produce_with: String,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}
