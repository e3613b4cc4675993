use thiserror::Error;

use crate::physics::Channel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("pixel ({row}, {col}) outside a {rows}x{cols} detector")]
    PixelOutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("backward requested before a forward pass was recorded")]
    NoForward,

    #[error("no gradient recorded for parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("{0:?} channel not present in the projection stack")]
    ChannelAbsent(Channel),

    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("need at least {needed} views, found {found}")]
    InsufficientViews { needed: usize, found: usize },

    #[error("invalid constraint indices {indices:?} for {views} views")]
    InvalidIndices { indices: Vec<usize>, views: usize },

    #[error("non-finite loss {loss} at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, loss: f64 },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated or oversized file: expected {expected} bytes, found {found}")]
    PayloadLength { expected: usize, found: usize },

    #[error("malformed header: {0}")]
    Header(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
