//! Experiment runner: configuration, training loop, records, sweeps and plots.

pub mod config;
pub mod plot;
pub mod record;
pub mod runner;
pub mod sweep;

pub use config::{ExperimentConfig, Task};
pub use record::{read_jsonl, RunRecord};
pub use runner::{run_experiment, train, TrainOutcome};
pub use sweep::{sweep, SweepSummary};
