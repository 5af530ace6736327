use std::path::PathBuf;

use thiserror::Error;

/// Pipeline failures, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] nrc_core::Error),

    #[error("{stage} needs the {missing} stage: {reason}; run `nrc {missing}` first")]
    StageOrder {
        stage: &'static str,
        missing: &'static str,
        reason: String,
    },

    #[error("invalid experiment config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: written under config {found}, expected {expected}; refusing mixed provenance")]
    Provenance {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{} input file(s) failed, first: {}", .failures.len(), .failures[0])]
    BadInputs { failures: Vec<String> },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for bad input, 3 for running stages out of order, 4 for numerics.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::StageOrder { .. } => 3,
            CliError::Core(nrc_core::Error::Numerics(_)) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
