use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the signal, model, and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed WAV: {0}")]
    Format(String),

    #[error("unsupported audio encoding: {0}")]
    Unsupported(String),

    #[error("manifest row {row}: {message}")]
    Manifest { row: usize, message: String },

    #[error("filter design failed: {0}")]
    FilterDesign(String),

    #[error("empty signal")]
    EmptySignal,

    #[error("noise reference is all zeros")]
    ZeroNoise,

    #[error("signal is all zeros")]
    ZeroSignal,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("frame of {len} samples is shorter than the {window}-sample window")]
    ShortFrame { len: usize, window: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    Numerics(String),

    #[error("class index {0} is outside the class set")]
    Class(usize),

    #[error("cannot stratify: {0}")]
    Stratify(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
