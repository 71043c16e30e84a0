use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    ConfigMismatch(String),
    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("state not admissible: x({t}) = {value}")]
    Inadmissible { t: f64, value: f64 },
    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("Hamiltonian slope must be positive, got {0}")]
    NonPositiveSlope(f64),
    #[error("state lies outside the value-function domain")]
    OutOfDomain,
    #[error("gradient oracle failed: {0}")]
    GradientFailure(String),
    #[error("closed loop lost positivity at t = {t} (x = {value})")]
    PositivityLoss { t: f64, value: f64 },
    #[error("utility is degenerate: sup U1 = {u_sup} <= U1(0) = {u_at_0}")]
    DegenerateUtility { u_sup: f64, u_at_0: f64 },
    #[error("kernel sweep exhausted at k = {k} (bound {bound:e} >= threshold {threshold:e})")]
    SweepExhausted { k: usize, bound: f64, threshold: f64 },
    #[error("no dyadic floor satisfies the blow-up conditions down to 2^-40")]
    NoFeasibleNu,
    #[error("point outside sampled range: {0}")]
    OutOfRange(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Stable machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ConfigMismatch(_) => "ConfigMismatch",
            Error::NonFiniteState { .. } => "NonFiniteState",
            Error::Inadmissible { .. } => "Inadmissible",
            Error::DivisionByZero(_) => "DivisionByZero",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::NonPositiveSlope(_) => "NonPositiveSlope",
            Error::OutOfDomain => "OutOfDomain",
            Error::GradientFailure(_) => "GradientFailure",
            Error::PositivityLoss { .. } => "PositivityLoss",
            Error::DegenerateUtility { .. } => "DegenerateUtility",
            Error::SweepExhausted { .. } => "SweepExhausted",
            Error::NoFeasibleNu => "NoFeasibleNu",
            Error::OutOfRange(_) => "OutOfRange",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Io(_) => "Io",
        }
    }
}
