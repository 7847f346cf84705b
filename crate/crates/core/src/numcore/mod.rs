//! Tensors, reproducible random streams, the differentiation tape and
//! finite-difference oracles.

pub mod diff;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use diff::{eval, fd_grad, fd_grad5, grad, hvp, hvp_step, max_rel_error, value_and_grad};
pub use rng::RngStream;
pub use tape::{Tape, Var};
pub use tensor::{ParamSet, Tensor};
