use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("hessian for {layer} is not positive definite after damping")]
    SingularHessian { layer: String },

    #[error("pruning ratio {0} is outside [0, 1]")]
    InvalidRatio(f64),

    #[error("{0}: empty batch")]
    EmptyBatch(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("block {block}: {source}")]
    Block {
        block: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("round {round}, member {member} (policy {policy:?}): {source}")]
    Candidate {
        round: usize,
        member: usize,
        policy: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("round {round}, {stage}: {source}")]
    Round {
        round: usize,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("refusing to overwrite existing run in {0}; pass resume or force")]
    RunExists(PathBuf),

    #[error("resume mismatch: {0}")]
    ResumeMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("config: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn dims(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn in_block(self, block: usize) -> Self {
        Error::Block {
            block,
            source: Box::new(self),
        }
    }
}
