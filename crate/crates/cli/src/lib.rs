//! Command-line driver: sweeps, analyses, reports and synthetic stores.
//!
//! Exit codes: 0 success (per-row failures included), 2 environment or
//! backend failure, 3 insufficient data, 64 usage.

pub mod analyze;
pub mod config;
pub mod error;
pub mod report;
pub mod store;
pub mod sweep;
pub mod synth;

pub use error::{CliError, CliResult};
