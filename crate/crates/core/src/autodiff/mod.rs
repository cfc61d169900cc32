//! Dense reverse-mode automatic differentiation over 2-D `f64` tensors.
//!
//! A [`Tape`] records every op; [`Tape::backward`] sweeps it in reverse. Parameters
//! live in a [`ParamStore`] outside the tape and are re-registered each step.

mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::ParamStore;
pub use tape::{BatchNormState, DropoutKey, Gradients, Tape, Var};
pub use tensor::Tensor;
