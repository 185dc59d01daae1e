//! Dense `f64` tensors, a reverse-mode gradient tape, and optimizers.
//!
//! Everything here is sized for small convolutional networks on a CPU:
//! convolution is lowered to patch extraction plus GEMM, and a tape lives for
//! exactly one forward/backward pass.

pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use optim::{adadelta_step, AdadeltaState, SgdMomentum};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
