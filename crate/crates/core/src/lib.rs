//! Lesion sweeps over small decoder-only transformers.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: a deterministic toy transformer behind the [`model::Backend`]
//!   trait, plus the weight-bundle file format.
//! - [`lesion`]: severities, Bernoulli masks, replacement strategies, seed
//!   derivation and sparsity-matched random controls.
//! - [`battery`]: the fixed 20-prompt battery.
//! - [`generation`]: decoding under a lesion, next-token KL, residual-state
//!   change and per-token likelihood of external text.
//! - [`scoring`]: symptom schema, heuristic and external scorers, surface
//!   features.
//! - [`records`]: JSONL record store, deduplication, condition profiles,
//!   stratum pairing and checksum manifests.

pub mod battery;
pub mod error;
pub mod generation;
pub mod lesion;
pub mod matrix;
pub mod model;
pub mod records;
pub mod rng;
pub mod scoring;

pub use error::{Error, Result};
