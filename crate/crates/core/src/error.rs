use std::io;

use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index out of bounds: {0}")]
    Bounds(String),

    #[error("function is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("all importance weights are -inf")]
    DegenerateWeights,

    #[error("sequence of {len} steps cannot be split into blocks of {block_len}")]
    Blockification { len: usize, block_len: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint is incompatible: {0}")]
    Compatibility(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("statistics error: {0}")]
    Stats(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for the CLI: 1 for configuration problems, 2 for runtime aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}
