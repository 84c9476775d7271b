//! Dense tensors, reverse-mode autodiff, Adam and a finite-difference checker.

mod adam;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig};
pub use gradcheck::{grad_check, grad_check_many, grad_check_report, relative_error, GradCheckReport, Stencil};
pub use graph::{Graph, Mode, Var};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;
