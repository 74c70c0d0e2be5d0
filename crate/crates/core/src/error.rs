//! Error type shared across the crate.

use std::fmt;
use std::io;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Tensor or image dimensions do not match what an operation expects.
    Shape(String),
    /// A configuration value violates its invariant.
    Config(String),
    /// The encoder produced a non-finite value inside the given layer.
    NonFinite { layer: usize },
    /// Class label outside `[0, n_classes)`.
    LabelOutOfRange { label: usize, n_classes: usize },
    /// An operation that needs data was handed none.
    EmptyInput(&'static str),
    /// A file does not start with the expected magic bytes.
    BadMagic { expected: &'static str, found: [u8; 4] },
    /// Unsupported version or dtype byte in a container file.
    BadVersion { field: &'static str, value: u8 },
    /// A file ended before its declared payload.
    Truncated { expected: usize, found: usize },
    /// Declared dimensions overflow addressable memory.
    DimsOverflow,
    /// A parsed input fails a semantic check (row sums, duplicate names, ...).
    Validation(String),
    /// Underlying I/O failure.
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::NonFinite { layer } => {
                write!(f, "non-finite value produced in encoder layer {layer}")
            }
            Error::LabelOutOfRange { label, n_classes } => {
                write!(f, "label {label} out of range for {n_classes} classes")
            }
            Error::EmptyInput(what) => write!(f, "empty {what}"),
            Error::BadMagic { expected, found } => {
                write!(f, "bad magic: expected {expected:?}, found {found:?}")
            }
            Error::BadVersion { field, value } => {
                write!(f, "unsupported {field} byte: {value}")
            }
            Error::Truncated { expected, found } => {
                write!(f, "truncated file: expected {expected} bytes, found {found}")
            }
            Error::DimsOverflow => write!(f, "tensor dimensions overflow addressable memory"),
            Error::Validation(msg) => write!(f, "validation failed: {msg}"),
            Error::Io(err) => write!(f, "i/o error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        Error::Io(err)
    }
}

impl Error {
    /// True for errors caused by the operating system rather than by the
    /// content of an input. The CLI maps these to a distinct exit code.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
