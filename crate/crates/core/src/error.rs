use thiserror::Error;

use crate::attack::ReconstructionParams;

/// Errors raised by the kernel, model, optimizer, attack and metric routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("NTK kernel is undefined at the origin (zero-norm input)")]
    ZeroNormInput,

    #[error("training failed: {0}")]
    Training(String),

    #[error("non-finite gradient entry at index {index}")]
    NonFiniteGradient { index: usize },

    #[error("non-finite value during {context} at step {step}")]
    NonFinite { context: &'static str, step: usize },

    #[error("attack aborted at step {step}: non-finite loss")]
    AttackAborted {
        step: usize,
        last_finite: Box<ReconstructionParams>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        });
    }
    Ok(())
}
