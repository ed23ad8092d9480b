use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("length {0} is not a power of two")]
    NonPowerOfTwo(usize),
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },
    #[error("no convergence after {iterations} iterations (last estimate {estimate})")]
    NoConvergence { estimate: f64, iterations: usize },
    #[error("invalid mask count L = {0}")]
    InvalidL(usize),
    #[error("negative spectrum entry {value} at index {index}")]
    NegativeLambda { index: usize, value: f64 },
    #[error("explicit Haar sampling limited to N <= {limit}, got {n}")]
    ExplicitTooLarge { n: usize, limit: usize },
    #[error("bad aspect: M = {m}, N = {n}")]
    BadAspect { m: usize, n: usize },
    #[error("ensemble `{0}` is not supported here")]
    UnsupportedEnsemble(String),
    #[error("spectral measure kind `{0}` is not supported here")]
    UnsupportedKind(String),
    #[error("step size must be positive, got {0}")]
    BadGamma(f64),
    #[error("numeric proximal map failed to bracket the minimizer at x = {x}")]
    ProxDiverged { x: f64 },
    #[error("reference signal has zero norm")]
    ZeroSignal,
    #[error("bad probabilities: {0}")]
    BadProbabilities(String),
    #[error("nonlinearity {0} is not flagged divergence-free")]
    NotDivergenceFree(usize),
    #[error("Monte Carlo standard error too high: {0}")]
    McVarianceTooHigh(String),
    #[error("polynomial degree must be at least 1, got {0}")]
    BadDegree(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn dims(expected: usize, got: usize, context: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            expected,
            got,
            context: context.into(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
