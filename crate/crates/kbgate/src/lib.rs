//! Knowledge-boundary gating toolkit for retrieval-augmented VQA.
//!
//! The pipeline: sample a vision-language model repeatedly per query, score
//! each sample with a judge model, aggregate the scores into per-query
//! means, turn the means into hard/soft boundary labels, export byte-exact
//! SFT training files for an external trainer, and — once a boundary model
//! exists — gate retrieval at answer time through it. An evaluation harness
//! reports judge scores, token accuracy, search ratios, threshold sweeps,
//! and stage timing, all runnable against a deterministic mock backend.

pub mod answer;
pub mod cli;
pub mod config;
pub mod domain;
pub mod error;
pub mod eval;
pub mod gate;
pub mod gateway;
pub mod jsonl;
pub mod judge;
pub mod labels;
pub mod metrics;
pub mod par;
pub mod retrieval;
pub mod run;
pub mod runstore;
pub mod sampling;
pub mod sft;
pub mod stats;
pub mod template;

pub use error::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
