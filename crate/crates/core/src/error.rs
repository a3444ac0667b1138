use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("timestep {t} out of range for a schedule with {n_steps} steps")]
    IndexOutOfRange { t: usize, n_steps: usize },

    /// The quantization bin width at this timestep is zero.
    #[error("timestep {0} has zero bin width and cannot be quantized")]
    InvalidTimestep(usize),

    #[error("symbol {symbol} is outside the coder alphabet [{min}, {max}]")]
    AlphabetOverflow { symbol: i64, min: i64, max: i64 },

    #[error("channel {channel} spans {size} symbols, more than the coder limit of {max}")]
    AlphabetTooWide { channel: usize, size: usize, max: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("channel {0} has no symbols to fit a model")]
    EmptyChannel(usize),

    #[error("corrupt payload: {0}")]
    Corrupt(String),

    #[error("schedule fingerprint mismatch: container expects {expected}, receiver has {actual}")]
    ScheduleMismatch { expected: String, actual: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn corrupt(msg: impl Into<String>) -> Self {
        Error::Corrupt(msg.into())
    }
}
