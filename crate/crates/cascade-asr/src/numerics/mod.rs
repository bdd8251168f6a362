//! Minimal f64 numerics: a dense matrix type, log-space scalar
//! helpers, a reverse-mode gradient tape, and a finite-difference
//! gradient checker.
//!
//! Everything downstream (encoders, losses, distillation) is built
//! from the primitive ops recorded on [`GradTape`].  The tape is the
//! single source of truth for derivatives; no op has a hand-written
//! gradient anywhere else in the crate.

mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use scalar::{log_softmax, logaddexp, logsumexp};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::Tensor;
