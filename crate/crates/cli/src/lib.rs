//! Batch runner around the `msmc` engine: configuration, dataset ingestion, score map
//! export and the synthetic smoke-test dataset.

pub mod config;
pub mod dataset;
pub mod export;
pub mod run;
pub mod synth;
