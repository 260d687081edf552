use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Two objects that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A model, field or configuration violates one of its invariants.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// A scalar argument is outside its admissible range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The brute-force oracle was asked to enumerate too many states.
    #[error("capacity exceeded: {states} states requested, limit is {limit}")]
    Capacity { states: u128, limit: u128 },

    /// Marginals were requested from a sample set with no samples.
    #[error("empty sample set")]
    EmptySampleSet,

    /// A file did not follow the expected on-disk layout.
    #[error("format error: {0}")]
    Format(String),

    /// Configuration file could not be parsed or validated.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
