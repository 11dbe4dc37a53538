//! Trajectory knowledge discovery: ingestion, features, fuzzy clustering,
//! filters, replayable pipelines, synthetic benchmarks and evaluation.

pub mod fcm;
pub mod features;
pub mod filters;
pub mod trajectory;
pub mod kdb;
pub mod pipeline;
pub mod benchmark;
pub mod evaluation;
