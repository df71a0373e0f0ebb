use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("unsupported layer for {op}: {layer}")]
    UnsupportedLayer { op: &'static str, layer: &'static str },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failures while decoding a model or dataset file.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("unrecognised file: bad magic {found:?} or version {version}")]
    Version { found: [u8; 4], version: u32 },

    #[error("truncated payload: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("inconsistent shapes in file: {0}")]
    ShapeInconsistency(String),

    #[error("malformed metadata: {0}")]
    Metadata(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
