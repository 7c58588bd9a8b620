use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} is outside the schedule domain [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("matrix is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("rank deficient data: numerical rank {rank} < required {required}")]
    RankDeficient { rank: usize, required: usize },

    #[error("unsupported for this model variant: {0}")]
    Unsupported(String),

    #[error("objective is unbounded above on the subspace")]
    Unbounded,

    #[error("did not converge: {0}")]
    NoConvergence(String),

    #[error("sampler step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error in {what}: {reason}")]
    Parse { what: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn check_dim(expected: usize, got: usize, context: &str) -> Result<()> {
        if expected != got {
            return Err(Error::Dimension {
                expected,
                got,
                context: context.to_string(),
            });
        }
        Ok(())
    }
}
