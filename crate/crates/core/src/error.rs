use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    /// A model or profile invariant does not hold. `invariant` is a short stable
    /// tag such as "kernel normalization" or "rate positivity".
    #[error("validation error ({invariant}) at `{key}`: {detail}")]
    Validation {
        invariant: &'static str,
        key: String,
        detail: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("arity mismatch: expected sector 1+{expected}, got 1+{got}")]
    Arity { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("desk-scale cap exceeded: {what} = {value} > {cap}")]
    CapExceeded {
        what: &'static str,
        value: usize,
        cap: usize,
    },

    #[error("overlapping slot sets: {0}")]
    Overlap(String),

    #[error("selector out of range: {0}")]
    Selector(String),

    #[error("zero partition norm")]
    ZeroNorm,

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("step rejected at t = {t}: mass drift {drift:e} exceeds {limit:e}")]
    StepRejected { t: f64, drift: f64, limit: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(
        invariant: &'static str,
        key: impl Into<String>,
        detail: impl Into<String>,
    ) -> Self {
        Error::Validation {
            invariant,
            key: key.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
