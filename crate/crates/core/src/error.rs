use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed volume header: {0}")]
    Format(String),
    #[error("volume payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("mask contains non-binary value {value} at voxel {index}")]
    Label { value: f64, index: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid phantom spec: {0}")]
    Spec(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("checkpoint incompatible: {0}")]
    Compatibility(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category name, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::Truncated { .. } => "truncation",
            Error::Label { .. } => "label",
            Error::Parameter(_) => "parameter",
            Error::Spec(_) => "spec",
            Error::Sampling(_) => "sampling",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Degenerate(_) => "degenerate",
            Error::Compatibility(_) => "compatibility",
            Error::Schema(_) => "schema",
            Error::Diverged { .. } => "divergence",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
