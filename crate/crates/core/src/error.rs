use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum GpnError {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("jittered Cholesky failed after escalating jitter to {last_jitter:e}")]
    JitterExhausted { last_jitter: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("moment matrix is not positive semi-definite (determinant {det:e})")]
    NotPsd { det: f64 },
    #[error("negative propagated variance {value:e} at layer {layer}, unit {unit}")]
    NegativeVariance { layer: usize, unit: usize, value: f64 },
    #[error("non-finite gradient component at parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("bad network shape: {0}")]
    BadShape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("dataset missing: {0}")]
    DatasetMissing(String),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = GpnError> = std::result::Result<T, E>;
