use thiserror::Error;

/// Errors raised by the tensor and training substrate.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("graph cycle detected during backward")]
    GraphCycle,

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
