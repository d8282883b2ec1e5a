//! Crate-wide error type.
//!
//! Contract violations (bad shapes, empty masks, degenerate statistics) are
//! reported as structured variants rather than panics so the CLI can map them
//! to exit codes.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: shape mismatch: {details}")]
    Shape { op: &'static str, details: String },

    #[error("{op}: mask selects no pixels")]
    EmptyMask { op: &'static str },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{0}")]
    Train(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Helper so `fs` calls can carry the offending path.
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by user-supplied input (configs, malformed
    /// files, bad CLI values): the CLI maps these to exit code 2, everything
    /// else to 1.
    pub fn is_user_input(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Json(_))
    }
}
