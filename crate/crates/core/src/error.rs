use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate scale {target}: no structure survives in any block")]
    DegenerateScale { target: f64 },

    #[error("non-finite loss {value} at step {step} ({context})")]
    NonFinite {
        value: f64,
        step: usize,
        context: String,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
