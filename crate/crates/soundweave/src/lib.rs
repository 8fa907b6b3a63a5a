//! Two-stage masked generative token pipeline for video-conditioned audio.
//!
//! Stage one predicts a unified audio semantic token stream (speech fused
//! with background events) from video features and a speech token condition.
//! Stage two refines semantic tokens into a multi-layer acoustic code grid,
//! coarse to fine. Both stages are masked generative transformers trained
//! with masked cross-entropy and decoded by iterative parallel unmasking with
//! classifier-free guidance.
//!
//! Everything runs on a procedurally generated synthetic world whose codecs
//! are exact, so speech/background disentanglement, codec round-trips, and
//! the evaluation metrics all have closed-form oracles to test against.
//!
//! Start with the `examples/` directory: each example is a runnable tour of
//! one capability (codecs, masking, training, decoding, metrics, the full
//! pipeline). The `soundweave` binary wires the same library calls into
//! `gen-data`, `train`, `generate`, and `eval` commands.

pub mod acoustic;
pub mod error;
pub mod config;
pub mod masking;
pub mod sampler;
pub mod semantic;
pub mod world;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tokens;

pub use error::{Error, Result};
