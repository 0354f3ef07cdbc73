//! Dense tensors, reverse-mode gradients, SGD and gradient checking.

pub mod gradcheck;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::sgd_step;
pub use rng::{uniform, RngState};
pub use tape::{CustomOp, Gradients, ParamId, ParamStore, Parameter, Tape, Var};
pub use tensor::{dot, logsumexp, matmul, matmul_t, softmax, softmax_slice, Tensor, MASKED};
