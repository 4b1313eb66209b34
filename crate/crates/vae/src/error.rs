use thiserror::Error;

pub type Result<T, E = VaeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error(transparent)]
    Core(#[from] sfgs_core::Error),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step} after lowering the learning rate")]
    NonFinite { step: u64 },
    #[error("tensor `{name}`: {reason}")]
    Tensor { name: String, reason: String },
}
