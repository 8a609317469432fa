//! Error types shared across the crate.

use thiserror::Error;

/// Everything that can go wrong in the library.
///
/// Variants are grouped by how a caller should react: `Config` means the
/// request itself was malformed, `Data`/`Format` mean an input file or array
/// was bad, `Numeric` means the computation blew up.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("raster format error: {0}")]
    Format(#[from] FormatError),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("insufficient revisit candidates for tile {tile}: need {needed}, have {have}")]
    InsufficientCandidates {
        tile: String,
        needed: usize,
        have: usize,
    },

    #[error("pixel ({row}, {col}) is invalid in every view")]
    AllViewsInvalid { row: usize, col: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Raster container decode failures, one code per failure mode.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes (not an S4XR file)")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("dtype mismatch: file holds {found}, caller wants {wanted}")]
    DtypeMismatch {
        found: &'static str,
        wanted: &'static str,
    },
    #[error("truncated payload: header promises {expected} bytes, file holds {got}")]
    Truncated { expected: usize, got: usize },
    #[error("header overflow: dimension product does not fit in usize")]
    DimOverflow,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}
