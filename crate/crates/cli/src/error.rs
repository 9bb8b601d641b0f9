// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use headscope::ErrorCategory;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] headscope::Error),

    #[error(
        "the test split has the same content hash as the probe split ({0}); heads must be \
         identified on data disjoint from evaluation (pass --allow-overlap to override)"
    )]
    Overlap(String),

    #[error("{0}")]
    Usage(String),

    #[error("config file {path}: {reason}")]
    Config { path: PathBuf, reason: String },
}

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_VALIDATION: u8 = 3;
pub const EXIT_IO: u8 = 4;
pub const EXIT_NUMERIC: u8 = 5;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e.category() {
                ErrorCategory::Validation => EXIT_VALIDATION,
                ErrorCategory::Io => EXIT_IO,
                ErrorCategory::Numeric => EXIT_NUMERIC,
            },
            CliError::Overlap(_) | CliError::Config { .. } => EXIT_VALIDATION,
            CliError::Usage(_) => EXIT_USAGE,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
