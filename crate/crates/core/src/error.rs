use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid observation window: {0}")]
    Window(String),
    #[error("non-finite value at {0}")]
    NonFinite(String),
    #[error("division hazard at {0}: zero denominator with epsilon = 0")]
    DivisionHazard(String),
    #[error("trace does not belong to these parameters: {0}")]
    TraceMismatch(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model file: {0}")]
    ModelFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
