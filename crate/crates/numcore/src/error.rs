use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient for parameter {index}; optimizer step rejected")]
    NonFiniteGrad { index: usize },

    #[error("backward called twice without a new forward")]
    TapeSpent,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{0}")]
    Invalid(String),
}

impl NumError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        NumError::Invalid(msg.into())
    }
}
