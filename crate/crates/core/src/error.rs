use thiserror::Error;

/// Errors raised by the regression pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point {t} lies outside the domain [{lo}, {hi}]")]
    Domain { t: f64, lo: f64, hi: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid basis configuration: {0}")]
    InvalidBasis(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("rank deficient normal equations ({0}); use a positive roughness")]
    RankDeficient(String),

    #[error("covariance is not positive definite (minimum eigenvalue estimate {min_eigenvalue:e})")]
    IllConditioned { min_eigenvalue: f64 },

    #[error("criterion {criterion} is undefined: {reason}")]
    UndefinedCriterion { criterion: String, reason: String },

    #[error("no grid point could be fitted: {0}")]
    AllFitsFailed(String),

    #[error("csv error: {0}")]
    Csv(String),
}

impl Error {
    /// Short machine-readable identifier for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain { .. } => "domain",
            Error::Dimension(_) => "dimension",
            Error::InvalidBasis(_) => "invalid_basis",
            Error::Validation(_) => "validation",
            Error::EmptyDataset => "empty_dataset",
            Error::RankDeficient(_) => "rank_deficient",
            Error::IllConditioned { .. } => "ill_conditioned",
            Error::UndefinedCriterion { .. } => "undefined_criterion",
            Error::AllFitsFailed(_) => "all_fits_failed",
            Error::Csv(_) => "csv",
        }
    }

    /// Whether the failure stems from the numerics rather than from the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient(_)
                | Error::IllConditioned { .. }
                | Error::UndefinedCriterion { .. }
                | Error::AllFitsFailed(_)
        )
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
