use thiserror::Error;

/// Errors raised across the identification pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("integration diverged at t = {time} s")]
    Divergence { time: f64 },

    #[error("normal matrix is singular (smallest eigenvalue {min_eigenvalue:.3e}); consider raising gamma_reg")]
    Singular { min_eigenvalue: f64 },

    #[error("quadratic program is infeasible: {0}")]
    QpInfeasible(String),

    #[error("quadratic program is unbounded: {0}")]
    QpUnbounded(String),

    #[error("quadratic program did not converge after {iterations} iterations (primal {primal:.3e}, dual {dual:.3e}, complementarity {complementarity:.3e})")]
    QpNotConverged {
        iterations: usize,
        primal: f64,
        dual: f64,
        complementarity: f64,
    },

    #[error("ground-truth oracle unavailable: {0}")]
    UnsupportedOracle(String),

    #[error("degenerate model: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }

    /// Coarse class used by the command line for exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Dimension { .. } | Error::UnsupportedOracle(_) => {
                ErrorKind::Config
            }
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => ErrorKind::Io,
            _ => ErrorKind::Numerical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Numerical,
    Io,
}

pub type Result<T> = std::result::Result<T, Error>;
