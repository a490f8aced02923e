use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("parameter `{0}` is frozen and cannot be optimized")]
    FrozenParameter(String),

    #[error("base model must be frozen before training a head")]
    BaseNotFrozen,

    #[error("gradient check precondition failed: {0}")]
    CheckPrecondition(String),

    #[error("invalid user id {0:?}: expected [A-Za-z0-9._-]+")]
    InvalidUserId(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("corrupted file {path}: {msg}")]
    Corrupted { path: PathBuf, msg: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
