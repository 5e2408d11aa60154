//! Reproducible desk-scale experiments: synthetic data, training loops with
//! oracle metrics, batch-size sweeps and gradient checks.

pub mod config;
pub mod gradcheck;
pub mod metrics;
pub mod synthetic;
pub mod train;

pub use config::{OptimizerKind, RunConfig, Schedule};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use metrics::{emit_metrics, load_metrics, MetricsFormat, MetricsRecord};
pub use synthetic::{generate_paired, generate_synthetic};
pub use train::{plateau, sweep_batch_size, train, train_bimodal, SweepResult, TrainRun};
