use thiserror::Error;

pub type Result<T, E = LmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LmError {
    #[error(transparent)]
    Core(#[from] regla_core::Error),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("task: {0}")]
    Task(String),

    #[error("non-finite loss at step {step}; diagnostic:\n{diagnostic}")]
    NonFiniteLoss { step: usize, diagnostic: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
