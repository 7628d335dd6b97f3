use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("broadcast across the time axis is not allowed ({0})")]
    TimeBroadcast(String),

    #[error("running statistics not populated for layer `{0}`")]
    StatsUnpopulated(String),

    #[error("gamma must be positive for threshold folding: layer `{layer}` has {value} at (t={t}, c={c})")]
    NonPositiveGamma {
        layer: String,
        t: usize,
        c: usize,
        value: f64,
    },

    #[error("expected binary input at `{0}`")]
    NotBinary(String),

    #[error("operation not allowed in {mode} mode: {what}")]
    Mode { mode: String, what: String },

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("config: {0}")]
    Config(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("event stream: timestamp decreases at record {index} ({prev} -> {next})")]
    NonMonotonicEvents { index: usize, prev: u32, next: u32 },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
