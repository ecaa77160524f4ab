use std::path::PathBuf;

/// Errors raised across the codec, language model, data and harness layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid code: component {index} = {value} is outside [0, {level})")]
    InvalidCode {
        index: usize,
        value: i64,
        level: u32,
    },

    #[error("codebook index {index} is outside [0, {size})")]
    InvalidIndex { index: u64, size: u64 },

    #[error("token {token} is outside the vocabulary of size {vocab}")]
    Vocabulary { token: u32, vocab: usize },

    #[error("misaligned streams: {0}")]
    Alignment(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("context overflow: {len} positions exceed the maximum of {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("fingerprint mismatch: {0}")]
    Fingerprint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Safetensors(#[from] safetensors::SafeTensorError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse class of an error, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Io { .. }
            | Error::Data(_)
            | Error::Json(_)
            | Error::Safetensors(_)
            | Error::Fingerprint(_)
            | Error::Vocabulary { .. }
            | Error::Alignment(_) => ErrorClass::Data,
            _ => ErrorClass::Runtime,
        }
    }
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Runtime => 4,
        }
    }
}
