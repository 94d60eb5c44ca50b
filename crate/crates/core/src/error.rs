//! Error type shared by all pipeline stages.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum CoreError {
    #[error("parse error at {file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("referential integrity: {0}")]
    Integrity(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("llm transport error [request {request_id}]: {msg}")]
    Transport { request_id: String, msg: String },
    #[error(transparent)]
    Nn(#[from] ueidg_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
