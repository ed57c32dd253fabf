use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("non-finite value {what}")]
    NonFinite { what: String },
    #[error("solver unstable at t={t:.4}: |value| reached {max:.3e}")]
    Unstable { t: f64, max: f64 },
    #[error("CFL number {cfl:.3} exceeds limit {limit:.3} at t={t:.4}")]
    Cfl { cfl: f64, limit: f64, t: f64 },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, FieldsError>;
