use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("data length {got} does not match expected {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("pyramid with {levels} levels would shrink dimension {dim} to {size} (< 4)")]
    PyramidTooDeep { levels: usize, dim: usize, size: usize },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("empty mask")]
    EmptyMask,

    #[error("every voxel is a hole; nothing to interpolate from")]
    AllHoles,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidDims(_) => "invalid_dims",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::GeometryMismatch(_) => "geometry_mismatch",
            Error::PyramidTooDeep { .. } => "pyramid_too_deep",
            Error::DegenerateFit(_) => "degenerate_fit",
            Error::EmptyMask => "empty_mask",
            Error::AllHoles => "all_holes",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}
