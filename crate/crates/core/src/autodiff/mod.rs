//! Dense tensors, a dynamic reverse-mode tape, and the momentum SGD update.

pub mod gradcheck;
pub mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{sgd_momentum_step, Sgd};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{argmax, log_softmax, softmax, Result, Tensor, TensorError};
