use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("not enough scatterers: need {needed}, field has {available}")]
    NotEnoughScatterers { needed: usize, available: usize },

    #[error("empty codebook")]
    EmptyCodebook,

    #[error("split needs {requested} locations but dataset has {available}")]
    InsufficientRecords { requested: usize, available: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: non-finite loss {loss}")]
    NonFiniteLoss { epoch: usize, loss: f64 },

    #[error("malformed {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("output directory is locked: {}", .0.display())]
    Locked(PathBuf),

    #[error("manifest check failed: {0}")]
    Verify(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingArtifact(_) => 2,
            Error::Verify(_) => 3,
            Error::Locked(_) => 4,
            _ => 1,
        }
    }
}
