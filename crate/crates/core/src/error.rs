use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: u32, loss: f64 },

    #[error("insufficient history for class {class} at epoch {epoch}: {needed} epochs required")]
    InsufficientHistory { class: usize, epoch: u32, needed: usize },

    #[error("verification error: {0}")]
    Verification(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
