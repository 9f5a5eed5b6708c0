//! Small reverse-mode autodiff stack: tensors, a gradient tape, dense and
//! LSTM layers, and Adam.

mod adam;
mod layers;
mod params;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use layers::{
    lstm_forward, lstm_init, lstm_step, lstm_step_tape, mlp_forward, mlp_forward_tape, mlp_init, mlp_init_sizes, LstmState,
};
pub use params::ParamSet;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("empty input sequence")]
    EmptySequence,
    #[error("backward requires a scalar root, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("parameter set mismatch: {0}")]
    ParamMismatch(String),
}

#[cfg(test)]
mod tests;
