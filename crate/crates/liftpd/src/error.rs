//! Crate-wide error type.

use std::fmt;
use std::io;

#[derive(Debug)]
pub enum Error {
    /// Malformed input line: wrong field count or a non-numeric field.
    Parse { line: usize, msg: String },
    /// Non-monotone timestamps or sample spacing outside tolerance.
    Timing(String),
    /// Empty input where at least one sample, window, or fold is required.
    Empty(String),
    /// A channel with zero variance cannot be standardized.
    DegenerateChannel(usize),
    /// `select_sensor` applied to a recording that is already single-site.
    AlreadySingleSite,
    /// Stream or recording shorter than the requested window length.
    TooShort { len: usize, window_len: usize },
    /// Tensor shape mismatch.
    Shape(String),
    /// Invalid configuration value or combination.
    Config(String),
    /// Unreadable, corrupt, or truncated checkpoint file.
    Checkpoint(String),
    /// Both classes are required but only one is present (or labels missing).
    SingleClass(String),
    Io(io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Parse { line, msg } => write!(f, "parse error at line {line}: {msg}"),
            Self::Timing(s) => write!(f, "timing error: {s}"),
            Self::Empty(s) => write!(f, "empty input: {s}"),
            Self::DegenerateChannel(c) => {
                write!(f, "degenerate channel {c}: zero variance, cannot standardize")
            }
            Self::AlreadySingleSite => write!(f, "recording is already single-site (3 channels)"),
            Self::TooShort { len, window_len } => {
                write!(f, "too short: {len} samples < window length {window_len}")
            }
            Self::Shape(s) => write!(f, "shape error: {s}"),
            Self::Config(s) => write!(f, "config error: {s}"),
            Self::Checkpoint(s) => write!(f, "corrupt checkpoint: {s}"),
            Self::SingleClass(s) => write!(f, "single-class data: {s}"),
            Self::Io(e) => write!(f, "I/O error: {e}"),
            Self::Json(e) => write!(f, "JSON error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(e) => Some(e),
            Self::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Self::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Self::Json(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
