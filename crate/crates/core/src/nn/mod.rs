//! Minimal learning substrate: tensors, dense/embedding/GRU layers with
//! exact hand-written gradients, losses, SGD with a cosine-annealing
//! schedule, checkpoints, and finite-difference gradient checking.
//!
//! There is deliberately no autodiff graph here. The model zoo is small and
//! fixed, and every backward pass is checked against central finite
//! differences in the test suites.

pub mod checkpoint;
pub mod dense;
pub mod embedding;
pub mod gradcheck;
pub mod gru;
pub mod loss;
pub mod schedule;
pub mod sgd;
pub mod tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{context}: expected length {expected}, got {actual}")]
    ShapeMismatch { context: &'static str, expected: usize, actual: usize },
    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("gradient blow-up in parameter '{param}': non-finite gradient, training aborts")]
    GradientBlowUp { param: String },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
