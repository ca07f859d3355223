//! Causal-intervention analysis of small decoder-only transformers.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and the numeric kernels (matmul, RMSNorm,
//!   softmax, rotary embeddings, cross entropy) with their gradients.
//! - [`model`]: configuration, checkpoint I/O, tokenizer, forward/backward and
//!   greedy generation.
//! - [`patch`]: hook points, activation caches, activation patching and
//!   attribution patching.
//! - [`metrics`]: logit difference, logit order, logit lens, KL divergence and
//!   pair preference.
//! - [`harness`]: prompt templates, counterfactual pairing and the experiment
//!   drivers.
//! - [`trainer`]: AdamW, component masks, language-model training and
//!   targeted fine-tuning.

// Negated float comparisons are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod patch;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
