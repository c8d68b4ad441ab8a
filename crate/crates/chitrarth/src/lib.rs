//! Desk-scale multilingual vision-language training pipeline.
//!
//! The crate wires a patch-based vision encoder, a modality projector, and a
//! byte-level autoregressive language model into a single trainable model,
//! with a two-stage freeze/train regime, a balanced multilingual data mixer
//! built on synthetic cipher languages, and a deterministic multilingual
//! evaluation harness.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod lm;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod projector;
pub mod tensor;
pub mod trainer;
pub mod tokenizer;
pub mod vision;

pub use error::{Error, Result};
