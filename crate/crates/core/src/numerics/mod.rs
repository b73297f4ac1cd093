//! Dense `f64` tensors with a reverse-mode gradient tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_with_fault, relative_error, GradCheckReport, ParamCheck, SCALE_FLOOR, SCALE_FLOOR_FRACTION,
};
pub use tape::{sigmoid, GradFault, Tape, Var};
pub use tensor::Tensor;

/// Floor applied inside every logarithm of the attention losses.
pub const EPS_LOG: f64 = 1e-12;
