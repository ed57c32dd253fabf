use std::io::ErrorKind as IoKind;
use std::path::Path;

use serde::Serialize;
use tempo_core::CoreError;
use tempo_fields::FieldsError;
use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Internal,
    Usage,
    Config,
    MissingFile,
    Data,
    Checkpoint,
    Numerical,
    Io,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 8] = [
        ErrorKind::Internal,
        ErrorKind::Usage,
        ErrorKind::Config,
        ErrorKind::MissingFile,
        ErrorKind::Data,
        ErrorKind::Checkpoint,
        ErrorKind::Numerical,
        ErrorKind::Io,
    ];

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Internal => 1,
            ErrorKind::Usage => 2,
            ErrorKind::Config => 3,
            ErrorKind::MissingFile => 4,
            ErrorKind::Data => 5,
            ErrorKind::Checkpoint => 6,
            ErrorKind::Numerical => 7,
            ErrorKind::Io => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Internal => "internal",
            ErrorKind::Usage => "usage",
            ErrorKind::Config => "config",
            ErrorKind::MissingFile => "missing_file",
            ErrorKind::Data => "data",
            ErrorKind::Checkpoint => "checkpoint",
            ErrorKind::Numerical => "numerical",
            ErrorKind::Io => "io",
        }
    }
}

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        CliError { kind, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Usage, message)
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        let kind = if e.kind() == IoKind::NotFound { ErrorKind::MissingFile } else { ErrorKind::Io };
        Self::new(kind, format!("{}: {e}", path.display()))
    }

    /// The single stderr line printed on failure.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "error": self.kind.as_str(),
            "exit_code": self.kind.exit_code(),
            "message": self.message,
        })
        .to_string()
    }
}

fn fields_kind(e: &FieldsError) -> ErrorKind {
    match e {
        FieldsError::Shape(_) | FieldsError::Schema(_) | FieldsError::Degenerate(_) => ErrorKind::Data,
        FieldsError::InvalidArgument(_) => ErrorKind::Usage,
        FieldsError::NonFinite { .. } | FieldsError::Unstable { .. } | FieldsError::Cfl { .. } => ErrorKind::Numerical,
        FieldsError::Io { source, .. } if source.kind() == IoKind::NotFound => ErrorKind::MissingFile,
        FieldsError::Io { .. } => ErrorKind::Io,
    }
}

impl From<FieldsError> for CliError {
    fn from(e: FieldsError) -> Self {
        CliError::new(fields_kind(&e), e.to_string())
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let kind = match &e {
            CoreError::Config(_) | CoreError::Path(_) => ErrorKind::Config,
            CoreError::InvalidArgument(_) => ErrorKind::Usage,
            CoreError::Shape(_) => ErrorKind::Data,
            CoreError::Checkpoint(_) | CoreError::Version { .. } => ErrorKind::Checkpoint,
            CoreError::Domain(_) | CoreError::Solver { .. } | CoreError::Diverged { .. } => ErrorKind::Numerical,
            CoreError::Fields(f) => fields_kind(f),
            CoreError::Io { source, .. } if source.kind() == IoKind::NotFound => ErrorKind::MissingFile,
            CoreError::Io { .. } => ErrorKind::Io,
        };
        CliError::new(kind, e.to_string())
    }
}
