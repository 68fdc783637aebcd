//! Reverse-mode automatic differentiation on dense f64 tensors.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{AdamState, ADAM_EPS, BETA1, BETA2};
pub use gradcheck::{
    finite_difference_check, GradCheckReport, DEFAULT_EPS, DEFAULT_MAX_COORDS,
};
pub use tape::{Tape, DIST_TOL, LOG_CLAMP, MASK_FILL};
pub use tensor::Tensor;
