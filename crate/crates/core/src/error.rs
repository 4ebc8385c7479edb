use std::io;

/// Errors produced by the pose estimation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("vertex {vertex} lies behind the camera (depth {depth})")]
    BehindCamera { vertex: usize, depth: f64 },

    #[error("inconsistent input: {0}")]
    Consistency(String),

    #[error("optimization failed after {iterations} iterations: {reason}")]
    Optimization {
        reason: String,
        iterations: usize,
        last_loss: f64,
    },

    #[error("background estimation failed: {0}")]
    Estimation(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        if err.is_io() {
            Error::Io(err.into())
        } else {
            Error::Format(err.to_string())
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn param(msg: impl Into<String>) -> Error {
    Error::Param(msg.into())
}
