//! Dense f64 tensor engine with reverse-mode autodiff.

pub mod ops;
pub mod tape;
pub mod tensor;

pub use tape::{ParamId, ParamStore, Tape, TapeOp, Var};
pub use tensor::Tensor;
