use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// Train-mode batch norm needs at least two rows to estimate a variance.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("numeric error at step {step}: {message}")]
    Numeric { step: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported version {found} (max supported {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("corrupt file at byte offset {offset}: {message}")]
    Corruption { offset: u64, message: String },

    #[error("bad data in record {record}: {message}")]
    Data { record: u64, message: String },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(step: usize, message: impl Into<String>) -> Self {
        Error::Numeric {
            step,
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 2 validation, 3 numeric, 4 format, 1 anything environmental (I/O).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_)
            | Error::Domain(_)
            | Error::DegenerateBatch(_)
            | Error::Config(_)
            | Error::EmptyDataset(_)
            | Error::Validation(_)
            | Error::Parse { .. } => 2,
            Error::Numeric { .. } => 3,
            Error::Format(_)
            | Error::UnsupportedVersion { .. }
            | Error::Corruption { .. }
            | Error::Data { .. }
            | Error::Json(_) => 4,
            Error::Io { .. } => 1,
        }
    }
}
