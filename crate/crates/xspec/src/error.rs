use thiserror::Error;

/// Toolkit-wide error type. Each variant maps to a distinct CLI exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("format: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("data: {0}")]
    Data(String),
}

impl Error {
    /// Stable nonzero exit code per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_) => 3,
            Error::Format(_) => 4,
            Error::ShapeMismatch(_) => 5,
            Error::InvalidInput(_) => 6,
            Error::Data(_) => 7,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
