//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiveError {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("timestep {t} out of range [1, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("invalid interval: {0}")]
    InvalidInterval(String),

    #[error("invalid token index {index} for {kind} vocabulary of size {size}")]
    InvalidToken { index: usize, kind: String, size: usize },

    #[error("zero-norm vector has no direction under the cosine metric (position {position})")]
    ZeroVector { position: usize },

    #[error("vocabulary invariant violated: {0}")]
    InvalidVocabulary(String),

    #[error("illegal box ({m_min},{n_min},{m_max},{n_max})")]
    IllegalBox { m_min: u32, n_min: u32, m_max: u32, n_max: u32 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss at iteration {iteration}: {value}")]
    NonFiniteLoss { iteration: usize, value: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("incompatible models: {0}")]
    IncompatibleModels(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DiveError>;
