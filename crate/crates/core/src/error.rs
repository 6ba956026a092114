use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("time {t} outside [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("alpha vanishes at t = {t}; f = alpha'/alpha is singular")]
    AlphaSingularity { t: f64 },

    #[error("gamma vanishes at t = {t}")]
    GammaSingularity { t: f64 },

    #[error("beta vanishes at t = {t}")]
    BetaSingularity { t: f64 },

    #[error("epsilon evaluates to {value} < 0 at t = {t}")]
    NegativeEpsilon { t: f64, value: f64 },

    #[error("negative radicand {value} in {what} at t = {t}")]
    NegativeRadicand {
        what: &'static str,
        t: f64,
        value: f64,
    },

    #[error("gamma_(t-dt)^2 - 2 eps dt = {value} < 0 at t = {t}")]
    ConstraintViolation { t: f64, value: f64 },

    #[error("singular covariance: {0}")]
    SingularCovariance(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("group {group} has {got} replicates; at least 2 are required")]
    InsufficientReplicates { group: usize, got: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("input {index} must be positive, got {value}")]
    NonPositiveInput { index: usize, value: f64 },

    #[error("training diverged at iteration {iter} (loss = {loss})")]
    Divergence { iter: usize, loss: f64 },

    #[error("path {path}, step {step}: {source}")]
    Step {
        path: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("at t = {t}: {source}")]
    AtTime {
        t: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn at_step(self, path: usize, step: usize) -> Self {
        Error::Step {
            path,
            step,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_time(self, t: f64) -> Self {
        Error::AtTime {
            t,
            source: Box::new(self),
        }
    }
}
