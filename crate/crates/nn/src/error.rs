use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("channel mismatch: input has {input} channels, kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variance must be strictly positive (index {index}, value {value})")]
    NonPositiveVariance { index: usize, value: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint architecture mismatch on `{key}`: expected {expected:?}, found {found:?}")]
    ArchitectureMismatch {
        key: String,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
