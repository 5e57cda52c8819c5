//! Dense `f64` tensors, a reverse-mode tape, seeded randomness and a
//! finite-difference gradient checker.

pub mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use rng::{derive_seed, Rng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{log_add_exp, log_sum_exp, Tensor};

pub(crate) use tensor::argmax;
