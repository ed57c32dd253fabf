use thiserror::Error;

use tempo_fields::FieldsError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid path parameters: {0}")]
    Path(String),
    #[error("outside the domain of definition: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("solver failed at t={t:.6}: {reason}")]
    Solver { t: f64, reason: String },
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
    #[error(transparent)]
    Fields(#[from] FieldsError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CoreError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
