use thiserror::Error;

/// Unified error type for the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite score")]
    NonFiniteScore,

    #[error("non-finite fitness")]
    NonFiniteFitness,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("matrix not symmetric: max |a_ij - a_ji| = {max_asym:e} exceeds {tol:e}")]
    NotSymmetric { max_asym: f64, tol: f64 },

    #[error("query budget exhausted")]
    BudgetExhausted,

    #[error("handle {0:?} already registered")]
    DuplicateHandle(String),

    #[error("unknown handle {0:?}")]
    UnknownHandle(String),

    #[error("step size diverged: sigma = {0:e}")]
    StepSizeDiverged(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config: {0}")]
    Config(String),

    #[error("format: {0}")]
    Format(String),

    #[error("protocol: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Transport-level failures are safe to retry; everything else is a
    /// terminal answer from the contract (budget, protocol, bad input).
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
