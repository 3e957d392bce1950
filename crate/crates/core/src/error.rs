use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    /// Every kernel weight in the neighborhood was zero.
    #[error("isolated location: no neighbor inside the kernel support")]
    Isolated,

    /// Accumulated precision matrix too ill-conditioned to solve.
    #[error("degenerate precision accumulation (condition estimate {0:.3e})")]
    Degenerate(f64),

    /// Trajectory moments carry no density mass.
    #[error("trajectory set has zero total weight")]
    NoMass,

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
