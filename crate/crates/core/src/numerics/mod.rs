//! Tensor type, differentiable operations, gradient checking, and I/O.

pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod params;
pub mod tape;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_many};
pub use params::{Bound, ParamId, ParamStore, Sgd};
pub use tape::{Gradients, Reduction, Tape, Var};
pub use tensor::{Real, Tensor};
