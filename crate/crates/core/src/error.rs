use std::path::PathBuf;

use thiserror::Error;

/// Error variants shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for a primitive.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A forward op or loss produced NaN/Inf.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A caller broke a precondition of an operation.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input row.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    /// Input does not follow the declared file schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Input parses but violates a data invariant.
    #[error("data error: {0}")]
    Data(String),

    /// Request outside what an operation supports (e.g. oracle size limits).
    #[error("scope error: {0}")]
    Scope(String),

    /// Retrieval protocol cannot be evaluated on the given data.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Checkpoint and dataset/config disagree.
    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
