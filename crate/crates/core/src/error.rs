use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("model evaluation produced a non-finite value at t={t} (x_prev={x_prev:?})")]
    NonFinite { t: usize, x_prev: Vec<f64> },

    #[error("model does not support {0}")]
    Unsupported(&'static str),

    #[error("invalid weight vector: {0}")]
    InvalidWeights(String),

    #[error("invalid branching bounds for particle {index}: need 0 < a < b < N, got ({a}, {b}) with N={n}")]
    InvalidBounds { index: usize, a: f64, b: f64, n: usize },

    #[error("empty particle matrix")]
    EmptyParticles,

    #[error("amplification factor must be >= 1, got {0}")]
    InvalidGamma(f64),

    #[error("cannot place {m} points in a zero-width region")]
    ZeroWidthRegion { m: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("SVR quadratic program infeasible after retries (final epsilon {epsilon})")]
    QpInfeasible { epsilon: f64 },

    #[error("step {t}: {source}")]
    Step {
        t: usize,
        #[source]
        source: Box<FilterError>,
    },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl FilterError {
    pub fn at_step(self, t: usize) -> Self {
        match self {
            e @ FilterError::Step { .. } => e,
            e => FilterError::Step { t, source: Box::new(e) },
        }
    }
}

impl From<std::io::Error> for FilterError {
    fn from(e: std::io::Error) -> Self {
        FilterError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, FilterError>;
