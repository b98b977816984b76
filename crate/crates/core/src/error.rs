use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("sequence of length {len} exceeds context limit {limit}")]
    ContextLimit { len: usize, limit: usize },

    #[error("label {label} out of range for {count} labels")]
    LabelRange { label: usize, count: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("embedding separation violated for token(s) {0:?}")]
    Separation(Vec<usize>),

    #[error("constraint {name:?}: {source}")]
    Constraint {
        name: String,
        #[source]
        source: Box<Error>,
    },

    #[error("state allocation of {requested} bytes exceeds memory cap of {cap} bytes")]
    MemoryCap { requested: usize, cap: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("embedding tables differ: {0} vs {1}")]
    TableMismatch(String, String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn in_constraint(self, name: &str) -> Self {
        Error::Constraint {
            name: name.to_string(),
            source: Box::new(self),
        }
    }
}
