//! Error type shared by every module in the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by callers that map errors to exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// A contract violation: bad shapes, bad arguments, protocol misuse.
    Contract,
    /// An I/O or on-disk format problem.
    Io,
}

#[derive(Debug)]
pub enum Error {
    /// Matrix/matrix shape disagreement; shapes are (rows, cols).
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// Vector length disagreement.
    DimMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    /// An operation received an empty input it cannot work with.
    Empty { what: &'static str },
    /// A scalar or count argument is out of its documented range.
    InvalidArg { what: String },
    /// Normalization or cosine on a zero-norm vector.
    ZeroNorm { op: &'static str },
    /// Training/inference protocol misuse (ordering, freeze, refit).
    Protocol { what: String },
    Io(std::io::Error),
    /// Malformed file contents (magic, counts, JSON, CSV).
    Format { what: String },
    /// Checkpoint format version not understood.
    VersionMismatch { found: u32, expected: u32 },
    /// Checkpoint payload does not match its recorded checksum.
    ChecksumMismatch { found: u32, expected: u32 },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io(_)
            | Error::Format { .. }
            | Error::VersionMismatch { .. }
            | Error::ChecksumMismatch { .. } => ErrorKind::Io,
            _ => ErrorKind::Contract,
        }
    }

    pub fn invalid_arg(what: impl Into<String>) -> Self {
        Error::InvalidArg { what: what.into() }
    }

    pub fn protocol(what: impl Into<String>) -> Self {
        Error::Protocol { what: what.into() }
    }

    pub fn format(what: impl Into<String>) -> Self {
        Error::Format { what: what.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: shape mismatch, {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::DimMismatch { op, expected, got } => {
                write!(f, "{op}: dimension mismatch, expected {expected}, got {got}")
            }
            Error::Empty { what } => write!(f, "empty input: {what}"),
            Error::InvalidArg { what } => write!(f, "invalid argument: {what}"),
            Error::ZeroNorm { op } => write!(f, "{op}: zero-norm input"),
            Error::Protocol { what } => write!(f, "protocol violation: {what}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Format { what } => write!(f, "format error: {what}"),
            Error::VersionMismatch { found, expected } => {
                write!(f, "format version {found} not supported (expected {expected})")
            }
            Error::ChecksumMismatch { found, expected } => {
                write!(f, "checksum mismatch: payload {found:#010x}, manifest {expected:#010x}")
            }
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format {
            what: format!("json: {e}"),
        }
    }
}
