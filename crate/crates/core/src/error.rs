use thiserror::Error;

/// Errors produced by the simulation and detection engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid constellation order {0}: must be a square of an even integer")]
    InvalidOrder(usize),

    #[error("message label {label} out of range 1..={order}")]
    Label { label: usize, order: usize },

    #[error("invalid constellation: {0}")]
    InvalidConstellation(String),

    #[error("constellation average power {power} differs from 1 by more than {tolerance}")]
    Normalization { power: f64, tolerance: f64 },

    #[error("exhaustive search over {hypotheses} hypotheses exceeds budget of {budget}")]
    BudgetExceeded { hypotheses: u128, budget: u64 },

    #[error("constellation not supported by this detector: {0}")]
    UnsupportedConstellation(String),

    #[error("bad weight file format: {0}")]
    Format(String),

    #[error("weight file truncated at byte offset {offset}: {what}")]
    Truncated { offset: usize, what: String },

    #[error("corrupt weights: tensor {0} contains non-finite values")]
    CorruptWeights(String),

    #[error("incomplete bundle: missing tensor {0}")]
    IncompleteBundle(String),

    #[error("invalid weight bundle: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_)
            | Error::Format(_)
            | Error::Truncated { .. }
            | Error::CorruptWeights(_)
            | Error::IncompleteBundle(_)
            | Error::Validation(_)
            | Error::Json(_) => 3,
            Error::Numeric(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
