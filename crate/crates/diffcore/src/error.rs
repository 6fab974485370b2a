use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("graph was evaluated without recording; backward is unavailable")]
    NotEvaluated,
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, expected \"TSAW\"")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error(transparent)]
    Tensor(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
