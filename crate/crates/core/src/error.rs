use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite values encountered in {0}")]
    NonFinite(String),

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated file while reading {0}")]
    Truncated(String),

    #[error("unknown layer kind tag {0}")]
    UnknownLayerKind(u8),

    #[error("unknown volume dtype tag {0}")]
    UnknownDtype(u8),

    #[error("file format error: {0}")]
    Format(String),

    #[error("parameter mask violation: {0} changed outside the mask")]
    MaskViolation(String),

    #[error("unknown parameter {0}")]
    UnknownParameter(String),

    #[error(
        "no cached source importance in checkpoint; run cache_source_importance after source training"
    )]
    MissingSourceImportance,

    #[error("structures cannot fit at grid size {0}")]
    PhantomDoesNotFit(usize),

    #[error("degenerate reference volume (constant intensity)")]
    DegenerateReference,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
