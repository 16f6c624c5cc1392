use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SenaError> = std::result::Result<T, E>;

/// Every failure the engine can report.
///
/// Variants are grouped into coarse categories (see [`ErrorCategory`]) so
/// the command-line runner can map them to stable exit codes.
#[derive(Debug, Error)]
pub enum SenaError {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid range [{lo}, {hi})")]
    InvalidRange { lo: f32, hi: f32 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {n_classes} classes")]
    InvalidLabel { label: usize, n_classes: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

/// Coarse error classes used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Shape,
    Argument,
    State,
    NotFound,
    Format,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Argument => 2,
            ErrorCategory::Shape => 3,
            ErrorCategory::State => 4,
            ErrorCategory::NotFound => 5,
            ErrorCategory::Format => 6,
            ErrorCategory::Io => 7,
        }
    }
}

impl SenaError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            SenaError::InvalidShape { .. } | SenaError::Shape(_) => ErrorCategory::Shape,
            SenaError::InvalidRange { .. }
            | SenaError::InvalidArgument(_)
            | SenaError::InvalidLabel { .. }
            | SenaError::Config(_) => ErrorCategory::Argument,
            SenaError::State(_) | SenaError::Conflict(_) => ErrorCategory::State,
            SenaError::NotFound(_) => ErrorCategory::NotFound,
            SenaError::Format { .. } => ErrorCategory::Format,
            SenaError::Io { .. } => ErrorCategory::Io,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SenaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        SenaError::Format {
            offset,
            reason: reason.into(),
        }
    }
}
