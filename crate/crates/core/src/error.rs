use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),

    #[error("model consistency: {0}")]
    Consistency(String),

    #[error("data error in {path}: {detail}")]
    Data { path: PathBuf, detail: String },

    #[error("model file error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
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

    pub(crate) fn data(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric/consistency.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InfeasibleBudget(_) | Error::Json(_) => 2,
            Error::Data { .. } | Error::Io { .. } | Error::Format(_) => 3,
            Error::Shape { .. }
            | Error::Contract(_)
            | Error::Unsupported(_)
            | Error::Consistency(_) => 4,
        }
    }
}
