use thiserror::Error;

/// Errors raised by the geometric constructions and their solvers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("non-finite value encountered in {0}")]
    NonFiniteValue(&'static str),

    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },

    #[error("no convergence after {iterations} iterations (residual {residual_norm:e})")]
    NoConvergence {
        iterations: usize,
        residual_norm: f64,
    },

    #[error("Cayley transform undefined (condition estimate {condition:e})")]
    CayleySingular { condition: f64 },

    #[error("stationarity system has distinct roots {separation:e} apart")]
    MultipleRootSuspected { separation: f64 },

    #[error("order fit degenerate: {0}")]
    DegenerateFit(&'static str),

    #[error("quadratic phase is degenerate (condition estimate {condition:e})")]
    DegeneratePhase { condition: f64 },

    #[error("antipodal pair")]
    AntipodalPair,

    #[error("tangent vector too long: |u| = {length} >= 2")]
    TangentTooLong { length: f64 },

    #[error("vector is not tangent at base (u.x = {dot:e})")]
    NotTangent { dot: f64 },

    #[error("degenerate midpoint configuration: {0}")]
    DegenerateConfiguration(&'static str),
}

impl Error {
    /// Short machine-readable tag, used in report rows as `failed:<tag>`.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::NonFiniteValue(_) => "NonFiniteValue",
            Error::SingularJacobian { .. } => "SingularJacobian",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::CayleySingular { .. } => "CayleySingular",
            Error::MultipleRootSuspected { .. } => "MultipleRootSuspected",
            Error::DegenerateFit(_) => "DegenerateFit",
            Error::DegeneratePhase { .. } => "DegeneratePhase",
            Error::AntipodalPair => "AntipodalPair",
            Error::TangentTooLong { .. } => "TangentTooLong",
            Error::NotTangent { .. } => "NotTangent",
            Error::DegenerateConfiguration(_) => "DegenerateConfiguration",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
