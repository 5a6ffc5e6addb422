//! capgen-core: a desk-scale image-captioning stack.
//!
//! A windowed-attention vision encoder and an attention-LSTM caption decoder,
//! trained with a noise-injection cross-entropy objective and evaluated with
//! corpus BLEU4 — all on top of a small reverse-mode autodiff tensor library,
//! with no numeric dependencies. Everything is deterministic given a seed.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod harness;
pub mod infer;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use tensor::{Tensor, TensorError};
