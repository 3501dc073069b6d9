//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid input values or geometry (bad config, element outside the
    /// source volume, window outside a series span, ...).
    #[error("validation: {0}")]
    Validation(String),

    /// Evaluation at a singular point (|r| = 0).
    #[error("singularity: {0}")]
    Singularity(String),

    /// An adaptive integration or an optimizer ran out of budget before
    /// reaching its tolerance. Carries the best estimate and its error bound
    /// where available.
    #[error("convergence: {msg} (best estimate {estimate:e}, error bound {error_bound:e})")]
    Convergence {
        msg: String,
        estimate: f64,
        error_bound: f64,
    },

    /// Degenerate fit design (e.g. all abscissae zero).
    #[error("rank deficiency: {0}")]
    Rank(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("config parse: {0}")]
    ConfigParse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code contract: 0 success, 2 validation, 3 convergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Singularity(_) | Error::Rank(_) | Error::ConfigParse(_) => 2,
            Error::Convergence { .. } => 3,
            Error::Io(_) | Error::Csv(_) => 4,
        }
    }
}
