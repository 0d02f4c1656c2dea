use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty dataset")]
    EmptyDataset,

    #[error("episode {episode}: {detail}")]
    Heterogeneous { episode: String, detail: String },

    #[error("missing manifest at {0}")]
    MissingManifest(PathBuf),

    #[error("checksum mismatch in {file}")]
    Checksum { file: String },

    #[error("truncated file {file}: expected {expected} bytes, found {found}")]
    Truncated {
        file: String,
        expected: usize,
        found: usize,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("bad magic bytes: expected {expected:?}")]
    Magic { expected: String },

    #[error("step index {t} out of range 0..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape overlap: {0}")]
    Overlap(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Validation errors are caused by user input rather than by the runtime.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::NonFinite(_))
    }
}
