use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("`{op}` received an empty input")]
    Empty { op: &'static str },

    #[error("output must be a scalar, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("loss function is not deterministic under a frozen seed")]
    NonDeterministic,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("malformed {kind} data at byte {offset}: {msg}")]
    Format {
        kind: &'static str,
        offset: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
