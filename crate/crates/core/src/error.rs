use alloc::string::String;

/// Errors raised by the core representation, renderer, codec and trainer.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A value outside the mathematical domain of an operation (NaN time, empty input, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// Array dimensions that do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Index outside a valid range.
    #[error("index {index} out of range 0..{len}")]
    Index { index: usize, len: usize },
    /// Invalid configuration or codec parameters.
    #[error("invalid spec: {0}")]
    Spec(String),
    /// A model state that cannot be rendered (degenerate quaternion, non-finite weights).
    #[error("invalid model state: {0}")]
    InvalidModel(String),
    /// A feature-video bitstream that could not be decoded.
    #[error("feature video decode failed at frame {frame}: {reason}")]
    Decode { frame: usize, reason: String },
    /// API misuse, e.g. asking for a backward pass without forward state.
    #[error("usage error: {0}")]
    Usage(String),
    /// A GopSegment container that could not be parsed.
    #[error("segment rejected: {0}")]
    Segment(SegmentError),
    /// Training produced a non-finite loss.
    #[error("non-finite loss at iteration {iteration}: {state}")]
    NonFinite { iteration: usize, state: String },
}

/// Why a GopSegment was refused.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SegmentError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated in {0}")]
    Truncated(&'static str),
    #[error("checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed {section}: {reason}")]
    Malformed { section: &'static str, reason: String },
}

impl From<SegmentError> for Error {
    fn from(e: SegmentError) -> Self {
        Error::Segment(e)
    }
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(alloc::format!($($arg)*)) };
}
pub(crate) use shape_err;
