//! Desk-scale transformer pretraining stack built around two training-recipe
//! mechanisms: a "read quietly" loss mask that suppresses next-token loss for
//! the first K predictions after each BOS token, and a "reading buddy"
//! architecture that adds a connector-projected tap from an auxiliary
//! encoder's penultimate layer onto the generator's input embeddings.
//!
//! Everything runs on a from-scratch reverse-mode autodiff tensor core
//! ([`tensor`]), so gradients are exact and checkable against finite
//! differences. The crate is organized around the training pipeline:
//!
//! - [`data`] — byte-level vocab, document packing, synthetic corpora
//! - [`model`] — decoder-only transformer with an additive input-embedding hook
//! - [`readq`] — the BOS-anchored loss mask
//! - [`fusion`] — buddy tap, sliding-window pooling, connector, fused forward
//! - [`trainer`] — deterministic AdamW loop with two-phase freezing
//! - [`eval`] — perplexity, position-bucket loss, multiple-choice scoring
//! - [`runconfig`] / [`runner`] — JSON run configs and run directories
//!
//! Each major capability has a runnable demo under `examples/`; the `quietread`
//! binary exposes the same library functions as subcommands.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod readq;
pub mod rng;
pub mod runconfig;
pub mod runner;
pub mod tensor;
pub mod trainer;

pub use tensor::{Tensor, TensorError};
