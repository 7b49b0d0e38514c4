//! Crate-wide error type.

use std::path::PathBuf;

/// Errors raised anywhere in the forecasting stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A shape precondition failed; `detail` names the offending shapes.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A documented contract was violated by the caller or by internal state.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Configuration rejected; every violated field is listed.
    #[error("invalid configuration: {}", violations.join("; "))]
    Config { violations: Vec<String> },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    /// Text rows and numeric window disagree in length.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// RevIN denormalization with gamma == 0 has no inverse.
    #[error("non-invertible normalization: gamma is zero")]
    NonInvertible,

    #[error("sequence length {got} exceeds backbone capacity {max}")]
    Capacity { got: usize, max: usize },

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// True for errors a CLI should report as misconfiguration (exit code 1)
    /// rather than a runtime failure (exit code 2).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::InsufficientData(_)
                | Error::InvalidPrompt(_)
                | Error::Alignment(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
