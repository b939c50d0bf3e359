//! Differentiable tensor substrate: pure kernels, a reverse-mode tape,
//! parameter storage, checkpoints and a finite-difference checker.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use kernels::{cross_entropy, layer_norm, log_softmax, softmax};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{AttnMask, Tape, Var};
pub use tensor::Tensor;
