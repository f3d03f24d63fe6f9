//! Dense `f64` tensors, a reverse-mode tape, and Adam.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_many, FD_STEP};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
