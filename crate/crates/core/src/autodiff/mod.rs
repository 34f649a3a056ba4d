//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.

mod graph;
mod gradcheck;
mod kernels;
mod primitive;

pub use graph::{CustomBackward, Graph, Var};
pub use gradcheck::{analytic_grad, eval_scalar, grad_check, grad_check_coords, grad_check_steps, rel_err, GradCheckReport, REL_ERR_FLOOR};
pub use kernels::Conv2dSpec;
pub use primitive::Primitive;
