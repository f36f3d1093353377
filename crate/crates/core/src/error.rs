use thiserror::Error;

/// Errors raised by the numeric kernels, fitting routines and I/O layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric failure: {what} ({detail})")]
    Numeric { what: &'static str, detail: String },

    #[error("MAP prior fit failed: {0}")]
    Fit(String),

    #[error("selection rule `{rule}` not applicable: {reason}")]
    RuleInapplicable { rule: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no successful replicates to aggregate")]
    EmptyAggregate,

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn numeric(what: &'static str, detail: impl Into<String>) -> Error {
    Error::Numeric {
        what,
        detail: detail.into(),
    }
}
