use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum GemtError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("token count {tokens} exceeds positional capacity {capacity} at {level} level")]
    Capacity {
        level: &'static str,
        tokens: usize,
        capacity: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("gradient oracle invalid: {0}")]
    OracleInvalid(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown parameter path `{0}`")]
    UnknownParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GemtError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        GemtError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn arg(op: &'static str, msg: impl Into<String>) -> Self {
        GemtError::InvalidArgument { op, msg: msg.into() }
    }

    /// True for failures caused by numerics (NaN/Inf) rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, GemtError::NonFinite { .. } | GemtError::OracleInvalid(_))
    }
}

pub type Result<T> = std::result::Result<T, GemtError>;
