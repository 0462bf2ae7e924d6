use thiserror::Error;

use crate::io::IoError;
use crate::spectrum::SpectrumError;

/// Failures shared by the mean-field solvers.
#[derive(Debug, Error)]
pub enum SolveError {
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("singular system: {0}")]
    Singular(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("dynamics diverged at step {step} (loss {loss:.3e})")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
    #[error(transparent)]
    Io(#[from] IoError),
}

pub type Result<T, E = SolveError> = std::result::Result<T, E>;
