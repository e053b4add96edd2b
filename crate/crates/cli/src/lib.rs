//! Harness around the toy detector: configuration, model assembly,
//! training, evaluation, checkpoints, self-tests and micro-benchmarks.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod model;
pub mod optim;
pub mod selftest;
pub mod train;

pub use config::DetectorConfig;
pub use model::Detector;
