//! Minimal reverse-mode differentiation engine and Adam optimizer.

mod graph;
mod optim;
mod real;
mod tensor;

pub use graph::{forward_backward, Graph, Target, Var};
pub use optim::{adam_step, clip_global_norm, global_norm, AdamConfig, AdamState};
pub use real::Real;
pub use tensor::{ParamSet, Tensor};
