use std::path::PathBuf;

/// Error type shared across the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("mask is not binary: entry {value} at index {index}")]
    NonBinaryMask { value: f32, index: usize },

    #[error("tape has no recorded node for the requested backward pass")]
    EmptyTape,

    #[error("backward root must be a scalar, got shape {0}")]
    NonScalarLoss(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("bad model container: {0}")]
    Container(String),

    #[error("no usable images found in {0}")]
    EmptyDataset(PathBuf),

    #[error("non-finite loss at epoch {epoch} (last good checkpoint: {checkpoint:?})")]
    NonFiniteLoss {
        epoch: usize,
        checkpoint: Option<PathBuf>,
    },
}

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArg(_) => 1,
            Error::Io { .. }
            | Error::Image { .. }
            | Error::Container(_)
            | Error::EmptyDataset(_) => 2,
            Error::NonFiniteLoss { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
