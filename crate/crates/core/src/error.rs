//! Crate-wide error type and exit-code classification.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("horizon end {t_end} must be strictly greater than start {t0}")]
    HorizonOrder { t0: f64, t_end: f64 },

    #[error("time grid needs at least one step")]
    ZeroSteps,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("coefficient `{name}` returned a non-finite value at t={t}, point={point:?}")]
    CoefficientEvaluation {
        name: &'static str,
        t: f64,
        point: Vec<f64>,
    },

    #[error(
        "Picard iteration failed to contract at t={t}, x={x:?} after {iterations} iterations \
         with sub-interval length {delta} already at its floor"
    )]
    PicardDivergence {
        t: f64,
        x: Vec<f64>,
        iterations: usize,
        delta: f64,
    },

    #[error("non-finite state on path {path} at step {step}")]
    NonFiniteState { path: usize, step: usize },

    #[error("solutions were driven by different noise (seeds {seed_a} vs {seed_b})")]
    MismatchedNoise { seed_a: u64, seed_b: u64 },

    #[error("initial conditions must differ for stability estimation")]
    IdenticalInitialConditions,

    #[error("R matrix is singular at t={t}")]
    SingularR { t: f64 },

    #[error("monotonicity certificate failed: worst residual {residual} exceeds {limit}")]
    CertificateFailure { residual: f64, limit: f64 },

    #[error("riccati oracle requires C = D = 0, S = 0 and zero affine terms; {0} is nonzero")]
    RestrictionViolation(&'static str),

    #[error("K_p is undefined for p = {0} (requires p > 1)")]
    KpDomain(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 numerical, 4 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } => 4,
            _ => 3,
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
