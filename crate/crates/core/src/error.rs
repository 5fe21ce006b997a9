use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum SerError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("shape error: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("input error: {0}")]
    Input(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("divergence at {context}: {detail}")]
    Divergence { context: String, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("compatibility error: checkpoint has {field}={found}, run expects {field}={expected}")]
    Compatibility {
        field: &'static str,
        found: usize,
        expected: usize,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SerError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SerError::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes the context of a divergence error, leaving other variants untouched.
    pub fn in_context(self, outer: impl std::fmt::Display) -> Self {
        match self {
            SerError::Divergence { context, detail } => SerError::Divergence {
                context: format!("{outer}, {context}"),
                detail,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, SerError>;
