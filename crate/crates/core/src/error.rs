use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("operator `{operator}` produced a non-finite value at t = {t}")]
    NonFinite { operator: String, t: f64 },

    #[error(
        "resolvent did not converge in {iterations} iterations (best residual {best_residual:e})"
    )]
    ResolventConvergence {
        iterations: usize,
        best_residual: f64,
    },

    #[error("state left the finite range after step {last_finite_step} (|X| = {norm:e})")]
    BlowUp { last_finite_step: usize, norm: f64 },

    #[error(
        "Picard iteration diverged at iteration {iteration} (residual {residual:e}); \
         use a smaller dt or a larger lambda"
    )]
    PicardDivergence { iteration: usize, residual: f64 },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("path {path}: {source}")]
    AtPath {
        path: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_path(self, path: usize) -> Self {
        Error::AtPath {
            path,
            source: Box::new(self),
        }
    }

    /// True for failures of the numerics (non-convergence, blow-up, non-finite
    /// evaluations) as opposed to malformed inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::DimensionMismatch { .. } | Error::InvalidInput(_) => false,
            Error::AtStep { source, .. } | Error::AtPath { source, .. } => source.is_numerical(),
            _ => true,
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
