//! Multi-task parameter-efficient fine-tuning on a desk-scale transformer.
//!
//! The crate provides, bottom up:
//!
//! - [`tensor`]: a minimal reverse-mode autodiff engine with a
//!   finite-difference gradient oracle;
//! - [`backbone`]: a configurable encoder- or decoder-style transformer with
//!   per-parameter freeze control and exact parameter accounting;
//! - [`peft`]: serial adapters, parallel adapters, LoRA and prefix tuning as
//!   injectable modules over a frozen backbone;
//! - [`data`]: byte-level tokenization, JSONL task loaders, synthetic task
//!   generators and the round-robin oversampling batch sampler;
//! - [`mtl`]: task heads, routing and learnable softmax loss weighting;
//! - [`trainer`]: Adam, the training loop with early stopping, metrics and
//!   token-cost accounting;
//! - [`checkpoint`]: a self-describing model archive.

pub mod checkpoint;
pub mod error;
pub mod rng;
pub mod tensor;

pub mod backbone;
pub mod data;
pub mod mtl;
pub mod peft;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::param::{Census, CensusFilter, ParamRegistry, Parameter};
pub use tensor::{backward, Dtype, Element, Tensor};
