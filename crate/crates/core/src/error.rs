use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Parse failure; `line` is 1-based (0 when the failure is not tied to a line).
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("degenerate adjacency row at point {index}: all neighbor weights are zero")]
    DegenerateRow { index: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint error in field `{field}`: {msg}")]
    Checkpoint { field: String, msg: String },

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn checkpoint(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Checkpoint {
            field: field.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command-line tool.
    ///
    /// 2 = I/O or parse, 3 = configuration or invalid input, 4 = numeric,
    /// 5 = training divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format { .. } | Error::Checkpoint { .. } => 2,
            Error::InvalidInput(_) | Error::Config(_) | Error::Shape { .. } => 3,
            Error::DegenerateRow { .. } | Error::Numeric(_) => 4,
            Error::Divergence { .. } => 5,
        }
    }
}
