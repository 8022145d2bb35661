use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("unknown inter edge `{0}`")]
    UnknownEdge(String),

    #[error("non-finite {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("partite count {0} outside 1..=16")]
    PartiteCount(usize),

    #[error("symbol {symbol} outside alphabet of size {size}")]
    SymbolOutOfAlphabet { symbol: i64, size: usize },

    #[error("invalid cdf table: {0}")]
    InvalidTable(String),

    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("coded buffer exhausted after {decoded} of {expected} symbols")]
    Underflow { decoded: usize, expected: usize },

    #[error("corrupt bitstream: {0}")]
    Corrupt(String),

    #[error("unsupported bitstream version {0}")]
    UnsupportedVersion(u8),

    #[error("budget {budget:.1} MAC/px is below the minimum achievable {minimum:.1} MAC/px")]
    BudgetInfeasible { budget: f64, minimum: f64 },

    #[error("complexity range is degenerate (min == max == {0})")]
    DegenerateRange(f64),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("{0}")]
    Empty(String),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
