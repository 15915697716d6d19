use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed number {0:?}")]
    MalformedNumber(String),
    #[error("decimal place {place} outside supported range [{min}, {max}]")]
    PlaceOutOfRange { place: i32, min: i32, max: i32 },
    #[error("malformed numeral: {0}")]
    MalformedNumeral(String),
    #[error("unknown property {0:?}")]
    UnknownProperty(String),
    #[error("value {value} of property {name:?} is not representable by its schema")]
    ValueOutOfRange { name: String, value: f64 },
    #[error("unknown token id {0}")]
    UnknownId(usize),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("text symbol {0:?} collides with a reserved token form")]
    ReservedSymbol(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("malformed sequence: {0}")]
    MalformedSequence(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sequence has no property block")]
    NoPropertyBlock,
    #[error("mask plan masks no position")]
    EmptyMask,
    #[error("sequence has no masked numeral slot")]
    NoMaskedNumerals,
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    IdOutOfRange { id: usize, vocab_size: usize },
    #[error("sequence length {len} exceeds model maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty dataset")]
    EmptyDataset,
    #[error("{path}:{line}: {message}")]
    Record { path: String, line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite value encountered: {0}")]
    NumericFailure(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

impl Error {
    /// Process exit code: 2 for configuration, 3 for data, 4 for numeric
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidSchema(_) => 2,
            Error::NumericFailure(_) => 4,
            _ => 3,
        }
    }
}
