use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the core crate.
///
/// The variants mirror the error taxonomy the service layer maps onto
/// transport status codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("weights error in tensor `{tensor}`: {message}")]
    Weights { tensor: String, message: String },

    #[error("manifest errors:\n{}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n"))]
    Manifest(Vec<LineDiagnostic>),

    #[error("no lung detected")]
    NoLung,

    #[error("alignment error, unmatched ids: {0:?}")]
    Alignment(Vec<String>),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("invalid state: {message}")]
    State { message: String, ids: Vec<String> },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

/// One problem found on one line of a manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineDiagnostic {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for LineDiagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn state(message: impl Into<String>) -> Self {
        Error::State { message: message.into(), ids: Vec::new() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
