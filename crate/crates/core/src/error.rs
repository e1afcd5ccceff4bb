use thiserror::Error;

use crate::numeric::NewtonReport;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at column {column})")]
    NotPositiveDefinite { column: usize, pivot: f64 },

    #[error("matrix is singular (column {column})")]
    Singular { column: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("line search stalled after {} iterations (gradient norm {:.3e})", .0.iterations, .0.gradient_norm)]
    LineSearchStalled(Box<NewtonReport>),

    #[error("no convergence within {} iterations (gradient norm {:.3e})", .0.iterations, .0.gradient_norm)]
    MaxIterations(Box<NewtonReport>),

    #[error("value {v} outside the domain of rho {rho}")]
    OutOfDomain { rho: String, v: f64 },

    #[error("degenerate rho: first and second derivatives at zero must be nonzero")]
    DegenerateRho,

    #[error("power divergence theta = {0} is a limit case; use the el or et kinds")]
    ThetaAtLimit(f64),

    #[error("unknown rho name {0:?}")]
    UnknownRho(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: String,
        message: String,
    },

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("syntax error at byte {offset}: expected one of {}", .expected.join(", "))]
    Syntax { offset: usize, expected: Vec<String> },

    #[error("unknown column {0:?}")]
    UnknownColumn(String),

    #[error("transform {transform} requires {requirement} values in column {column:?}")]
    InvalidTransformInput {
        transform: &'static str,
        requirement: &'static str,
        column: String,
    },

    #[error("separation: fitted probabilities reach 0 or 1, no finite maximum likelihood estimate")]
    Separation,

    #[error("rank deficient design: {0}")]
    RankDeficient(String),

    #[error("too few complete cases: need {needed}, have {have}")]
    TooFewCompleteCases { needed: usize, have: usize },

    #[error("calibration infeasible: moment residual {residual:.3e} after {iterations} iterations")]
    InfeasibleCalibration { residual: f64, iterations: usize },

    #[error("calibration functions must include a constant column")]
    MissingConstantColumn,

    #[error("estimating equation jacobian is singular")]
    SingularJacobian,
}

impl Error {
    /// Coarse class used by the command-line front end to pick an exit code.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io(_)
            | Error::Csv(_)
            | Error::Parse { .. }
            | Error::InvariantViolation(_)
            | Error::UnknownColumn(_)
            | Error::InvalidTransformInput { .. }
            | Error::TooFewCompleteCases { .. } => ErrorCategory::Data,
            Error::Syntax { .. }
            | Error::UnknownRho(_)
            | Error::ThetaAtLimit(_)
            | Error::DegenerateRho
            | Error::InvalidInput(_)
            | Error::MissingConstantColumn => ErrorCategory::Usage,
            _ => ErrorCategory::Numerical,
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NotPositiveDefinite { .. } => "NotPositiveDefinite",
            Error::Singular { .. } => "Singular",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::InvalidInput(_) => "InvalidInput",
            Error::LineSearchStalled(_) => "LineSearchStalled",
            Error::MaxIterations(_) => "MaxIterations",
            Error::OutOfDomain { .. } => "OutOfDomain",
            Error::DegenerateRho => "DegenerateRho",
            Error::ThetaAtLimit(_) => "ThetaAtLimit",
            Error::UnknownRho(_) => "UnknownRho",
            Error::Parse { .. } => "ParseError",
            Error::InvariantViolation(_) => "InvariantViolation",
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::Syntax { .. } => "SyntaxError",
            Error::UnknownColumn(_) => "UnknownColumn",
            Error::InvalidTransformInput { .. } => "InvalidTransformInput",
            Error::Separation => "Separation",
            Error::RankDeficient(_) => "RankDeficient",
            Error::TooFewCompleteCases { .. } => "TooFewCompleteCases",
            Error::InfeasibleCalibration { .. } => "InfeasibleCalibration",
            Error::MissingConstantColumn => "MissingConstantColumn",
            Error::SingularJacobian => "SingularJacobian",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Numerical,
    Data,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
