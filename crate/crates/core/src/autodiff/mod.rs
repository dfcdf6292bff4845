//! Minimal deterministic reverse-mode automatic differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, relative_error, relative_error_with_noise, GradCheckReport, LeafReport, RELATIVE_ERROR_FLOOR,
    ROUNDOFF_FACTOR,
};
pub use tape::{causal_mask, gelu, sigmoid, Tape, Var, LAYERNORM_EPS};
pub use tensor::Tensor;
