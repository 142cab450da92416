//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records each forward operation together with whatever it needs
//! for the reverse pass. [`Tape::backward`] walks the record in exact reverse
//! order and accumulates gradients into every node that depends on a leaf
//! created with `requires_grad`. Model parameters live in a [`ParamStore`]
//! and are bound onto a fresh tape for each step.

pub mod checkpoint;
mod linalg;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{Adam, AdamConfig};
pub use params::{he_normal, uniform, Bound, ParamId, ParamStore};
pub use tape::{sinusoidal_embed, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
