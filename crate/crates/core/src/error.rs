//! Error type shared across the crate.
//!
//! Variants are deliberately fine-grained: file loading distinguishes parse
//! errors, format-version mismatches, embedding-dimension mismatches and
//! semantic invariant violations, so callers (and the CLI exit-code mapping)
//! can tell malformed input apart from internal failures.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two embeddings (or an embedding and a declared dimension) disagree in length.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    /// An operation that needs at least one element received none.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Cosine similarity (or normalization) of a zero-length vector.
    #[error("zero-norm embedding in {0}")]
    ZeroNorm(String),

    /// NaN or infinity where a finite number is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A scalar parameter is outside its documented range.
    #[error("invalid parameter `{name}`: {message}")]
    InvalidParameter { name: String, message: String },

    /// A box with non-positive width or height, or coordinates out of range.
    #[error("invalid box {context}: [{x1}, {y1}, {x2}, {y2}]")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        context: String,
    },

    /// A category id that is not in the dataset's category table.
    #[error("unknown category id {id} in {context}")]
    UnknownCategory { id: u32, context: String },

    /// Category ids that must be disjoint (or unique) collide.
    #[error("category id {id} appears more than once in {context}")]
    DuplicateCategory { id: u32, context: String },

    /// Structured-text parse failure; offsets are 1-based.
    #[error("parse error in {path} at line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    /// The file declares a format version this build does not read.
    #[error("format version mismatch in {path}: file has version {found}, expected {expected}")]
    VersionMismatch {
        path: String,
        found: u32,
        expected: u32,
    },

    /// The file declares a different kind than the loader expected.
    #[error("format mismatch in {path}: expected a {expected} file, found `{found}`")]
    FormatMismatch {
        path: String,
        expected: String,
        found: String,
    },

    /// A semantic invariant of a loaded file does not hold; `location` is a
    /// field path such as `images[3].proposals[1].box`.
    #[error("invariant violation in {path} at {location}: {message}")]
    InvariantViolation {
        path: String,
        location: String,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// An internal computation could not complete (e.g. rejection sampling
    /// exhausted its attempt budget).
    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub(crate) fn dim(expected: usize, got: usize, context: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            expected,
            got,
            context: context.into(),
        }
    }

    pub(crate) fn param(name: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            message: message.into(),
        }
    }
}
