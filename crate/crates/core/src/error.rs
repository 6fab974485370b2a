use thiserror::Error;
use tsa_diffcore::{CheckpointError, DiffError};

use crate::data::DataError;
use crate::lexicon::LexiconError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error("{what} {value} outside 1..={max}")]
    OutOfRange { what: &'static str, value: usize, max: usize },
    #[error("transitions {transitions:?} leave an empty step on a timeline of {t}")]
    DegenerateStep { transitions: Vec<usize>, t: usize },
    #[error("width {width} is not divisible by {heads} heads")]
    HeadDivisibility { width: usize, heads: usize },
    #[error("no exemplar available for {0}")]
    NoExemplarAvailable(String),
    #[error("empty list")]
    EmptyList,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("series has zero rank variance")]
    DegenerateSeries,
    #[error("score range is zero")]
    ZeroRange,
    #[error("checkpoint does not match the model: {0}")]
    IncompatibleCheckpoint(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
