//! Differentiable computation in double precision: tensors, the tape,
//! deterministic random streams, optimizers and a finite-difference checker.

pub mod gradcheck;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_many, GRADIENT_FLOOR};
pub use optim::{Adam, Optimizer, Sgd};
pub use rng::RngStream;
pub use tape::{concat_cols, Gradients, OpKind, Record, Tape, Var};
pub use tensor::Tensor;
