use crate::gev::GevParams;
use thiserror::Error;

/// Errors surfaced by the library.
///
/// Out-of-support likelihood evaluations are not errors; they return `-inf`
/// so optimizers can backtrack. Errors are reserved for invalid inputs,
/// schema violations and non-convergent fits.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A point estimator could not be evaluated (e.g. degenerate sample).
    #[error("estimation error: {0}")]
    Estimation(String),

    /// Input data failed validation during ingestion.
    #[error("ingest error: {0}")]
    Ingest(String),

    /// Single-sample maximum-likelihood fit ran out of iterations.
    #[error("MLE did not converge after {iterations} iterations (gradient norm {grad_norm:.3e}); last iterate mu={}, sigma={}, xi={}", last.mu, last.sigma, last.xi)]
    MleNonConvergence {
        iterations: usize,
        grad_norm: f64,
        last: GevParams,
    },

    /// The penalized smooth fit failed; the message carries diagnostics.
    #[error("smooth fit failed: {0}")]
    FitFailure(String),

    /// A scoring rule is undefined for the given predictive distribution.
    #[error("score error: {0}")]
    Score(String),

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad inputs rather than numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Domain(_)
                | Error::Estimation(_)
                | Error::Ingest(_)
                | Error::Score(_)
                | Error::Config(_)
        )
    }
}
