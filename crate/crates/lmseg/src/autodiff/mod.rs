//! Minimal dense-tensor engine with reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, CheckInput, GradCheckReport, InputReport};
pub use tape::{BnStats, Tape, Var};
pub use tensor::{Scalar, Tensor};
