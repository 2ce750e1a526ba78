//! Command-line layer over the difference-token library: run configuration,
//! dataset ingestion and triplet sampling, cached anchoring, resumable
//! batch execution, scoring, and grid export.
//!
//! The binary entry point is `diffinv`; everything it does is reachable
//! through these modules so integration tests can drive commands in
//! process.

pub mod cache;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fixtures;

pub use commands::run::{RunReport, RunSummary, Stages, run_batch};
pub use config::{EvalConfig, Overrides, RunConfig};
pub use dataset::{ModelTriplet, PairRecord, SampleSummary, TripletRecord};
pub use error::{CliError, Result};
