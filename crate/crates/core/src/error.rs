use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch in layer `{layer}`: {detail}")]
    ShapeMismatch { layer: String, detail: String },

    #[error("batch has {got} feature columns, model expects {expected}")]
    InputDim { expected: usize, got: usize },

    #[error("label {label} at row {row} is outside [0, {num_classes})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("{path}: bad magic bytes (expected \"WSCK\")")]
    BadMagic { path: PathBuf },

    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error("{path}: truncated payload ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("{path}: header does not match spec ({detail})")]
    HeaderMismatch { path: PathBuf, detail: String },

    #[error("{path}: malformed header: {source}")]
    HeaderJson {
        path: PathBuf,
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Csv { path: PathBuf, detail: String },

    #[error("non-finite loss at Monte-Carlo draw {draw}")]
    NonFiniteDraw { draw: usize },

    #[error("parameter count {count} exceeds finite-difference cap {cap}")]
    FdCapExceeded { count: usize, cap: usize },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("recipe for {regime} failed after {attempts} attempts: {detail}")]
    RecipeFailed {
        regime: String,
        attempts: usize,
        detail: String,
    },
}

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument { .. } | Error::UnknownLayer(_) => ErrorKind::Usage,
            Error::NonFiniteDraw { .. }
            | Error::FdCapExceeded { .. }
            | Error::Diverged { .. }
            | Error::RecipeFailed { .. } => ErrorKind::Numerical,
            Error::NonFinite(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
