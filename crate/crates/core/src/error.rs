use thiserror::Error;

/// Errors raised across the occupancy pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape contract violated in `{op}`: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("non-finite value in `{op}`")]
    NonFinite { op: &'static str },

    #[error("loss term `{term}` is {value}")]
    BadLoss { term: String, value: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("missing gradient: {0}")]
    MissingGradient(String),

    #[error("finite-difference oracle invalid: {0}")]
    OracleInvalid(String),

    #[error("degenerate camera rig: {0}")]
    DegenerateRig(String),

    #[error("checkpoint tensor `{tensor}`: {msg}")]
    Checkpoint { tensor: String, msg: String },

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format { what, msg: msg.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
