//! Desk-scale workbench for two-stage vision-language alignment.
//!
//! Stage 1 trains a visual projector bridging a frozen patch encoder
//! and a frozen causal language model with a combined contrastive +
//! generative objective; stage 2 instruction-tunes the language model
//! and projector on dialogue data. Everything runs on a deterministic
//! f64 tensor kernel with tape-based reverse-mode gradients, so the
//! training math is finite-difference checkable end to end.

pub mod tensor;
pub mod train;

pub use tensor::{Tape, Tensor, TensorError, Var};

pub mod ablate;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod init;
pub mod lm;
pub mod instruct;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod schedule;
pub mod projector;
pub mod vision;
