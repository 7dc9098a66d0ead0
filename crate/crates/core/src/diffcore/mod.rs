//! Dense tensors, a recorded forward graph and reverse-mode gradients.
//!
//! Everything is `f64`. Broadcasting is limited to a right operand whose
//! shape is a suffix of the left operand's shape (bias-add patterns).

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use gradcheck::{compare_gradients, grad_check, param_grad_check, GradCheckEntry, GradCheckReport};
pub use graph::{Gradients, Graph, OpSpec, Var};
pub use params::{Init, Param, ParamId, ParamStore};
pub use tensor::Tensor;
