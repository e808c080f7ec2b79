//! Experiment orchestration: configs, synthetic data, toy models, training
//! protocols, gradient checks and the sparse-vs-dense benchmark.

pub mod bench;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod model;
pub mod train;

pub use config::{CorruptionKind, ExperimentConfig, Task};
pub use data::{gen_synthetic_scene, SceneParams, SyntheticScene};
pub use train::{ablate, robustness_suite, train_toy, Metrics};
