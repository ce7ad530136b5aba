//! Desk-scale parameter-efficient fine-tuning engine and benchmark harness.
//!
//! The crate bundles a minimal f32 autodiff engine, NF4/uniform quantization
//! codecs, low-rank adapters (plain and magnitude-decomposed) over dense or
//! quantized frozen bases, a micro transformer encoder with a span-extraction
//! QA head, SQuAD-style data handling and metrics, an AdamW training loop
//! with modeled memory accounting, and a grid/report benchmark CLI.

pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
