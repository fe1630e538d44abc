use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration at `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("inadmissible design: offset {offset} with beam width {width} violates |c| + w/2 <= 0.5")]
    InadmissibleDesign { offset: f64, width: f64 },

    #[error("projection operator has no active rays")]
    EmptyOperator,

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    /// Cholesky factorization failed even after the largest jitter.
    #[error("matrix of dimension {dim} is not numerically positive definite (last jitter {jitter:e})")]
    NotPositiveDefinite { dim: usize, jitter: f64 },

    #[error("candidate precomputation does not match the current belief or region of interest")]
    PrecompStale,

    #[error("belief does not track its precision matrix")]
    PrecisionUnavailable,

    #[error("every candidate projection is fully blocked and carries no information")]
    AllCandidatesBlocked,

    #[error("region of interest must contain at least one pixel")]
    EmptyRoi,

    #[error("session has been stopped")]
    SessionStopped,

    #[error("no projection is awaiting a measurement")]
    NoPendingDesign,

    #[error("correlation length estimate left the guard interval: {ell}")]
    Divergence { ell: f64 },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidConfig { .. } => "InvalidConfig",
            Error::InadmissibleDesign { .. } => "InadmissibleDesign",
            Error::EmptyOperator => "EmptyOperator",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::NotPositiveDefinite { .. } => "CholeskyFailure",
            Error::PrecompStale => "PrecompStale",
            Error::PrecisionUnavailable => "PrecisionUnavailable",
            Error::AllCandidatesBlocked => "AllCandidatesBlocked",
            Error::EmptyRoi => "EmptyRoi",
            Error::SessionStopped => "SessionStopped",
            Error::NoPendingDesign => "NoPendingDesign",
            Error::Divergence { .. } => "Divergence",
            Error::Parse(_) => "Parse",
            Error::Io(_) => "Io",
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }
}
