//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("index error: row {row} has label {label}, expected < {classes}")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("duplicate image id `{0}`")]
    DuplicateId(String),

    #[error("coverage error: image id `{0}` has no cached embedding")]
    MissingEmbedding(String),

    #[error("not found: image id `{0}`")]
    NotFound(String),

    #[error("provider `{provider}` failed for image `{id}`: {message}")]
    Provider {
        provider: String,
        id: String,
        message: String,
    },

    #[error("encoder output dimension changed from {expected} to {got} at image `{id}`")]
    EncoderDrift {
        id: String,
        expected: usize,
        got: usize,
    },

    #[error("degenerate embedding for image `{0}`: zero vector cannot be normalized")]
    DegenerateEmbedding(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this error class: 2 usage/flag, 3 validation
    /// or format, 4 runtime numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            Error::Numerical(_) | Error::DegenerateInput(_) => 4,
            _ => 3,
        }
    }
}
