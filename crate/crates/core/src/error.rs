use crate::tensor::DType;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch { expected: DType, found: DType },

    #[error("placement error: {0}")]
    Placement(String),

    #[error("layer {index} ({kind}) is not spatially local and cannot precede the split index")]
    NonLocalLayerInPrefix { index: usize, kind: String },

    #[error("shape underflow at layer {index} ({kind}): {detail}")]
    ShapeUnderflow {
        index: usize,
        kind: String,
        detail: String,
    },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("tile too small: {0}")]
    TileTooSmall(String),

    #[error("non-contiguous invalid region: {0}")]
    NonContiguousInvalidRegion(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }
}
