use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("size error: {0}")]
    Size(String),

    #[error("framing error: {0}")]
    Framing(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("aliasing: {0}")]
    Aliasing(String),

    #[error("propagation diverged at step {step} of span {span}")]
    Divergence { span: usize, step: usize },

    #[error("training diverged: {0}")]
    TrainingDivergence(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient support: {0}")]
    Support(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("insufficient data for split: {0}")]
    Split(String),

    #[error("overflow: {0}")]
    Overflow(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
