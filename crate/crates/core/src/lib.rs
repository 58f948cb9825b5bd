//! Desk-scale laboratory for step-distilled, architecture-evolved diffusion
//! models: noise schedules, DDIM sampling, a tiny conditional denoiser,
//! distillation, latency-driven evolution and decoder pruning.

pub mod checkpoint;
pub mod decoder;
pub mod distill;
pub mod error;
pub mod evaldata;
pub mod evolve;
pub mod optim;
pub mod nets;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
