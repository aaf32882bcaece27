//! Compact embedding layers built from learned K-way D-dimensional discrete
//! codes.
//!
//! Every symbol of a vocabulary is assigned a code of `D` digits, each in
//! `0..K`. The symbol's embedding is composed from per-digit code
//! embeddings, so the layer stores `N·D·log2(K)` code bits plus a small
//! shared codebook instead of an `N×d` float matrix. Codes are learned end to
//! end through a tempered-softmax relaxation with straight-through
//! estimation, optionally guided by continuous embeddings.

pub mod baselines;
pub mod codebook;
pub mod composer;
pub mod config;
pub mod diffcore;
pub mod guidance;
pub mod pipeline;
mod error;
pub mod rng;
pub mod selfcheck;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
