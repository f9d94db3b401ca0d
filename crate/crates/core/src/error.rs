use thiserror::Error;

#[derive(Debug, Error)]
pub enum GudnError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numerical divergence at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("checkpoint is missing inference parameters: {}", .0.join(", "))]
    MissingParams(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = GudnError> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> GudnError {
    GudnError::Config(msg.into())
}

pub(crate) fn data_err(msg: impl Into<String>) -> GudnError {
    GudnError::Data(msg.into())
}
