use xlane_core::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum TwinError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("vehicle {0} not present in frame at t={1:.2}s")]
    Lookup(u32, f64),
    #[error("not ready: {0}")]
    NotReady(String),
    #[error("insufficient future: {0}")]
    InsufficientFuture(String),
    #[error("corrupt record at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = TwinError> = std::result::Result<T, E>;
