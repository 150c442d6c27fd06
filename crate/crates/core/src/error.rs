use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-positive metric degree of freedom: {0}")]
    NonPositiveMetric(String),

    #[error("metric degenerated at t = {time}: {detail}")]
    DegenerateMetric { time: f64, detail: String },

    #[error("adaptive integrator exceeded the step rejection limit at t = {0}")]
    StepRejectedLimit(f64),

    #[error("operation not supported for this model: {0}")]
    UnsupportedVariant(String),

    #[error("time {time} lies past the degeneracy time {limit}")]
    PastDegeneracy { time: f64, limit: f64 },

    #[error("bad time order: need s < t, got s = {s}, t = {t}")]
    BadTimeOrder { s: f64, t: f64 },

    #[error("eigen-series did not converge within {0} terms")]
    SeriesNotConverged(usize),

    #[error("dimension must satisfy n >= 3, got {0}")]
    BadDimension(usize),

    #[error("eigensolver failed: {0}")]
    EigensolveFailed(String),

    #[error("probe set is empty")]
    EmptyProbeSet,

    #[error("bisection failed: {0}")]
    BisectionFailed(String),

    #[error("quadrature failed on [{a}, {b}]")]
    QuadratureFailed { a: f64, b: f64 },

    #[error("non-positive integral in bound evaluation: {0}")]
    NonpositiveIntegral(String),

    #[error("corollary requires the positive case inf S(., 0) > 0")]
    NotPositiveCase,

    #[error("comparison denominator m0 - c_n * tau vanishes at tau = {0}")]
    DenominatorZero(f64),

    #[error("theorem hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("linear solve did not converge: {0}")]
    SolveFailed(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Numerical failures (as opposed to bad input) map to exit code 4 in the CLI.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateMetric { .. }
                | Error::StepRejectedLimit(_)
                | Error::SeriesNotConverged(_)
                | Error::EigensolveFailed(_)
                | Error::BisectionFailed(_)
                | Error::QuadratureFailed { .. }
                | Error::NonpositiveIntegral(_)
                | Error::DenominatorZero(_)
                | Error::SolveFailed(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::InvalidConfig(e.to_string())
    }
}
