use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive semi-definite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("matrix is singular or not positive definite (min eigenvalue {min_eigenvalue:e})")]
    SingularMatrix { min_eigenvalue: f64 },
    #[error("no convergence: {0}")]
    NoConvergence(&'static str),

    #[error("cannot differentiate a non-scalar node of shape {0:?}")]
    NotScalar((usize, usize)),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("{0}")]
    InvalidConfig(String),
    #[error("world construction failed after {attempts} attempts: {reason}")]
    ConstructionFailed { attempts: usize, reason: String },
    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),
    #[error("inference strategy needs a gating network, but the model has none")]
    MissingGating,
    #[error("inference strategy needs {needed} ensemble members, got {found}")]
    MissingEnsembleMembers { needed: usize, found: usize },
    #[error("model has no trained multi-attribute head")]
    MissingMultiHead,
    #[error("insufficient samples: need at least {needed}, got {found}")]
    InsufficientSamples { needed: usize, found: usize },
    #[error("covariance is singular: {0}")]
    SingularCovariance(String),
    #[error("fisher matrix is singular (min eigenvalue {0:e}); supply a ridge")]
    SingularFisher(f64),
    #[error("invalid best-of-n count {0}; n must be at least 1")]
    InvalidN(i64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("series too short: need {needed} points, got {found}")]
    TooShort { needed: usize, found: usize },
    #[error("index sets must partition 0..{0}")]
    BadPartition(usize),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
