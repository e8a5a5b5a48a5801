//! Dense tensors with a small reverse-mode autodiff tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{analytic_gradient, gradcheck, gradcheck_components, relative_error, ScalarFn};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

pub(crate) use tape::plain_matmul_nt;

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;
