//! Error type shared by all modules.

use thiserror::Error;

/// Crate-wide error enumeration.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },

    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },

    #[error("matrix is numerically rank deficient (sigma_min/sigma_max = {ratio:.3e})")]
    RankDeficient { ratio: f64 },

    #[error("columns are not orthonormal (max defect {defect:.3e})")]
    NotOrthonormal { defect: f64 },

    #[error("subspaces at or beyond the cut locus (largest principal angle {angle:.6} rad)")]
    CutLocus { angle: f64 },

    #[error("tangent vector is based at a different point")]
    BaseMismatch,

    #[error("matrix is not positive semidefinite (eigenvalue {eigenvalue:.3e})")]
    NotPsd { eigenvalue: f64 },

    #[error("empty sample")]
    EmptySample,

    #[error("correlation weights are degenerate; no usable sample points remain")]
    DegenerateWeights,

    #[error("truncation size {t} outside the valid range [{k}, {r}]")]
    TruncationOutOfRange { t: usize, k: usize, r: usize },

    #[error("correlation matrix is singular even with jitter")]
    SingularCorrelation,

    #[error("eigenvalue gaps too small for an eigenvector derivative")]
    DegenerateSpectrum,

    #[error("need at least {needed} neighbors, have {available}")]
    InsufficientNeighbors { needed: usize, available: usize },

    #[error("implicit time-step matrix is singular")]
    SingularStep,

    #[error("reference trajectory has zero norm")]
    ZeroNorm,

    #[error("bad dimension: {context}")]
    BadDimension { context: String },

    #[error("invalid parameter: {context}")]
    InvalidParameter { context: String },

    #[error("Cholesky factorization failed after diagonal regularization")]
    CholeskyFailed,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(context: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
        }
    }

    pub(crate) fn shape(context: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
        }
    }

    pub(crate) fn invalid(context: impl Into<String>) -> Self {
        Error::InvalidParameter {
            context: context.into(),
        }
    }
}
