//! Crate-wide error type.
//!
//! Errors carry a coarse [`ErrorKind`] so callers (notably the CLI) can map
//! failures to distinct process exit codes without matching on every variant.

use std::path::PathBuf;

use thiserror::Error;

/// Coarse failure category, used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Invalid configuration or contract violation (bad shapes, bad flags).
    Config,
    /// Missing or malformed input data (files, manifests, images).
    Data,
    /// Non-finite values or other numeric breakdown at runtime.
    Numeric,
    /// Evaluation completed but some entries failed.
    PartialEval,
    /// Everything else (I/O, serialization).
    Other,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("manifest error at {path}:{line}: {msg}")]
    ManifestParse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("duplicate id '{id}' in manifest {path} (line {line})")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("image format error for {path}: {msg}")]
    ImageFormat { path: PathBuf, msg: String },

    #[error("entry '{id}' has no ground truth but the operation requires supervision")]
    MissingGroundTruth { id: String },

    #[error("shape mismatch in {context}: {expected} vs {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("numeric error in {context}: {msg}")]
    Numeric { context: String, msg: String },

    #[error("pretrained weights unavailable at {path}; use backbone = \"tiny\" for a from-scratch run or point `pretrained` at a valid weights file")]
    PretrainedUnavailable { path: PathBuf },

    #[error("incompatible checkpoint: {0}")]
    CheckpointVersion(String),

    #[error("evaluation finished with {failed} failed entries out of {total}")]
    PartialEvaluation { failed: usize, total: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Serde(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::ShapeMismatch { .. } | Error::CheckpointVersion(_) => {
                ErrorKind::Config
            }
            Error::ManifestParse { .. }
            | Error::DuplicateId { .. }
            | Error::MissingFile(_)
            | Error::ImageFormat { .. }
            | Error::MissingGroundTruth { .. } => ErrorKind::Data,
            Error::Numeric { .. } => ErrorKind::Numeric,
            Error::PretrainedUnavailable { .. } => ErrorKind::Config,
            Error::PartialEvaluation { .. } => ErrorKind::PartialEval,
            Error::Io { .. } | Error::Serde(_) => ErrorKind::Other,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
