//! Audio features, file formats and experiment orchestration for
//! few-shot class-incremental audio classification.
//!
//! The learning components live in `fcac-core`; this crate adds filter-bank
//! extraction, WAV input, manifests, a feature cache, TOML configs, JSON
//! artifacts and the `fcac` command-line tool.

pub mod artifacts;
pub mod audio;
pub mod cache;
pub mod config;
pub mod fbank;
pub mod manifest;
pub mod pipeline;
pub mod plot;

pub use config::ExperimentConfig;
