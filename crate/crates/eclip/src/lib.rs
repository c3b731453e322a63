//! Instance-centric contrastive vision-language pretraining on synthetic
//! product data.
//!
//! The crate trains a pair of transformer encoders plus a prompt-conditioned
//! instance decoder with contrastive objectives, then evaluates the frozen
//! model on zero-shot classification, retrieval, and grounding. Everything
//! is CPU-only f64 and bitwise deterministic for a fixed seed.

pub mod audit;
pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod momentum;
pub mod objectives;
pub mod tensor;
pub mod train;
