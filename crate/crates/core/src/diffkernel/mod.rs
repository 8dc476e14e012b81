//! Dense tensors with reverse-mode differentiation.

mod gradcheck;
mod graph;
mod param;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ERROR_FLOOR};
pub use graph::{Gradients, Graph, OpKind, Var, LOG_EPS};
pub use param::{Bound, ParamStore, Parameter};
pub use tensor::Tensor;
