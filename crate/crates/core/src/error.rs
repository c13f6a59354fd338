use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Structured parse failure for the binary file formats. Offsets are byte
/// positions from the start of the file.
#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic at byte {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: u64,
        expected: String,
        found: String,
    },
    #[error("unsupported {format} version {found} at byte {offset} (supported: {supported})")]
    UnsupportedVersion {
        format: &'static str,
        found: u16,
        supported: u16,
        offset: u64,
    },
    #[error("truncated input at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: u64, needed: usize },
    #[error("invalid value at byte {offset}: {reason}")]
    Invalid { offset: u64, reason: String },
    #[error("invalid JSON record on line {line}: {reason}")]
    Json { line: usize, reason: String },
}

#[derive(Error, Debug)]
pub enum Error {
    #[error("descriptor width mismatch: {left} vs {right} bits")]
    WidthMismatch { left: usize, right: usize },
    #[error("invalid descriptor width {0}: must be a positive multiple of 8")]
    InvalidWidth(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("not enough training data: {0}")]
    InsufficientData(String),
    #[error("image {0} is already present in the index")]
    DuplicateImage(u64),
    #[error("image {0} is not present in the index")]
    UnknownImage(u64),
    #[error("keypoint {keypoint} not found in image {image}")]
    DanglingKeypoint { image: u64, keypoint: u32 },
    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Parse(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn at_path(self, path: &std::path::Path) -> Self {
        match self {
            Error::Parse(source) => Error::Format {
                path: path.to_path_buf(),
                source,
            },
            Error::Io(source) => Error::File {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        }
    }
}
