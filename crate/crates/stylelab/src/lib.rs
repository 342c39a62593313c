//! Desk-scale diffusion stylization laboratory.
//!
//! Everything runs from scratch on CPU: a tensor/autodiff core, a small
//! patch-token denoiser with dual text/image cross-attention, noise
//! schedules and samplers, per-layer contribution probing with
//! hierarchical scale computation, LoRA fine-tuning, a procedural style
//! corpus generator, and probe-based evaluation metrics.
//!
//! See the crate `examples/` directory for one runnable example per major
//! capability, and the `stylelab` binary for the batch pipeline.

pub mod conditioning;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod harness;
pub mod lora;
pub mod optim;
pub mod probe;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
