use thiserror::Error;

/// Errors raised anywhere in the split-learning stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("protocol order violated: {0}")]
    ProtocolOrder(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("corrupt frame: {0}")]
    CorruptFrame(String),
    #[error("incomplete frame: need {needed} bytes, have {available}")]
    IncompleteFrame { needed: usize, available: usize },
    #[error("unsupported message type 0x{0:02x}")]
    UnsupportedVersion(u8),
    #[error("peer disconnected")]
    Disconnected,
    #[error("timed out waiting for peer")]
    TimedOut,
    #[error("format error: {0}")]
    Format(String),
    #[error("inconsistent file pair: {0}")]
    InconsistentPair(String),
    #[error("partition failure: {0}")]
    PartitionFailure(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("mismatched report axes: {0}")]
    MismatchedAxes(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
