//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Argument outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Array dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Dataset is empty, malformed, or missing a required field.
    #[error("data error: {0}")]
    Data(String),

    /// A line of a dataset file failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A required upstream artifact does not exist.
    #[error("dependency error: missing artifact {0}")]
    Dependency(String),

    /// An operation the current access mode forbids (e.g. gradient
    /// queries against a black-box policy).
    #[error("capability violation: {0}")]
    Capability(String),

    /// A gated verification assertion failed.
    #[error("verification failure: {0}")]
    Verification(String),

    /// Policy training did not reach its quality threshold.
    #[error("training failure: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
