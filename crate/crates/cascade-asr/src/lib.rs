//! Desk-scale joint streaming / non-streaming speech recognizer.
//!
//! The model is a cascade: a block-wise streaming encoder feeds a
//! full-context encoder stacked on top of it.  Four decoder heads
//! (streaming transducer, offline transducer, CTC, attention, and a
//! masked-LM head) are trained jointly, and a similarity-preserving
//! distillation term pulls the streaming branch toward the
//! full-context branch.  Everything runs on a small f64 tensor
//! library with tape-based reverse-mode differentiation, so the whole
//! system is trainable and testable on a single CPU core.

pub mod blocking;
pub mod decode;
pub mod distill;
pub mod harness;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod trainer;
pub mod verify;

use thiserror::Error;

/// Crate-wide error type.  Shape and domain violations are programming
/// errors surfaced eagerly; config and I/O errors are user-facing.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for the CLI: invalid configs exit 2, everything else 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            _ => 1,
        }
    }
}
