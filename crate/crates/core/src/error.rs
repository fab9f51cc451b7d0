use thiserror::Error;

/// An operation was called with arguments outside its contract.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("precondition violated: {0}")]
pub struct PreconditionError(pub String);

impl PreconditionError {
    pub fn new(msg: impl Into<String>) -> Self {
        PreconditionError(msg.into())
    }
}
