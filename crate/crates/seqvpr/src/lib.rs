//! Sequential visual place recognition on a desk-scale budget.
//!
//! The pipeline encodes a frame sequence into token features, refines them
//! with a recurrent deformable transformer encoder (one shared layer applied
//! frame by frame, the previous output acting as the query), pools the
//! per-frame outputs over time with generalized-mean pooling, and aggregates
//! tokens into a VLAD descriptor for nearest-neighbor retrieval. Training
//! uses a triplet loss with descriptor-space positives and hardest
//! geometric negatives; evaluation covers Recall@K, analytic FLOP/parameter
//! accounting, and a latency-constrained streaming benchmark.
//!
//! Start with the runnable examples (`cargo run --example ...`) or the
//! `seqvpr` CLI (`train`, `eval`, `stream`, `ablate`, `flops`, `gen-data`,
//! `grad-check`).

pub mod aggregation;
pub mod attention;
pub mod autodiff;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod oracles;
pub mod params;
pub mod recurrent;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod tsr;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Version string echoed into every output artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
