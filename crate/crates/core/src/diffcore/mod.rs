//! Minimal reverse-mode differentiation: tensors, an append-only computation
//! record, Adam, and a finite-difference gradient checker.

mod adam;
mod gradcheck;
mod graph;
pub mod kernels;
mod real;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, grad_check_at, relative_error, GradCheckConfig, GradCheckReport, DEFAULT_REL_FLOOR};
pub use graph::{CustomBackward, Gradients, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
