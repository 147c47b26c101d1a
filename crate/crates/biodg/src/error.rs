//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Variants carry
//! enough context to act on: shape errors name the offending layer,
//! too-short errors state the minimum duration, training aborts carry the
//! seed and step that produced the non-finite loss.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed container or header (e.g. truncated RIFF chunk).
    #[error("format error: {0}")]
    Format(String),

    /// Recognized container but unsupported encoding.
    #[error("unsupported encoding: {0}")]
    Unsupported(String),

    /// Input present but empty where content is required.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Record shorter than the windowing protocol allows.
    #[error(
        "record too short: {actual_s:.3} s, need at least {min_s:.3} s \
         (2 x trim + 1 s window)"
    )]
    TooShort { min_s: f64, actual_s: f64 },

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shape mismatch; `layer` names the layer that rejected it.
    #[error("shape error{}: expected {expected}, got {actual}",
            layer.as_ref().map(|l| format!(" in {l}")).unwrap_or_default())]
    Shape {
        expected: String,
        actual: String,
        layer: Option<String>,
    },

    /// Fold construction failure (e.g. fewer records than folds).
    #[error("fold error: {0}")]
    Fold(String),

    /// Class balancing failure (e.g. single-class input).
    #[error("balance error: {0}")]
    Balance(String),

    /// Operation called out of order (e.g. backward before forward).
    #[error("state error: {0}")]
    State(String),

    /// Invalid argument value (e.g. zero Monte-Carlo samples).
    #[error("argument error: {0}")]
    Argument(String),

    /// Input outside a function's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Probability rows that should sum to one do not.
    #[error("normalization error: {0}")]
    Normalization(String),

    /// Training diverged; carries seed/step diagnostics.
    #[error("training aborted: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::Shape {
            expected: expected.into(),
            actual: actual.into(),
            layer: None,
        }
    }

    pub fn shape_in(
        layer: impl Into<String>,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) -> Self {
        Error::Shape {
            expected: expected.into(),
            actual: actual.into(),
            layer: Some(layer.into()),
        }
    }
}
