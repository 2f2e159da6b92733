use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tower height {0} is not a power of two")]
    HeightNotPowerOfTwo(u64),

    #[error("digit budget exhausted: {0}")]
    DigitBudgetExhausted(String),

    #[error("exact evaluation budget exceeded: {0}")]
    BudgetExceeded(String),

    #[error("entry condition violated: {0}")]
    EntryViolation(String),

    #[error("no admissible time found for step {k} below N_max = {n_max}")]
    SearchExhausted { k: usize, n_max: u64 },

    #[error("certificate failed: {0}")]
    CertificateFailed(String),

    #[error("config error in `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: &str, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.to_string(),
            msg: msg.into(),
        }
    }
}
