//! Dense tensors and tape-based reverse-mode differentiation.
//!
//! Forward computations are recorded on a [`Tape`] as they run; [`Tape::backward`]
//! replays the records in reverse to produce vector-Jacobian products. Trainable
//! weights live in a [`ParamStore`] outside the tape, so a fresh tape is built
//! for every forward pass while gradients accumulate on the parameters.
//!
//! Broadcasting is limited to identical shapes and single-element operands.

mod element;
mod gemm;
pub mod gradcheck;
mod ops;
mod param;
mod tape;
mod tensor;

pub use element::{DType, Element};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
