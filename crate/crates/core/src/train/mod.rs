//! Configuration, schedules, checkpoints and the joint training loop.

pub mod checkpoint;
pub mod config;
mod run;
mod schedule;
mod trainer;

pub use checkpoint::{Checkpoint, CheckpointError, NamedArray};
pub use config::{Objective, RunConfig};
pub use run::{latest_checkpoint, read_metrics, run_train, RunSummary, METRICS_FILE};
pub use schedule::learning_rate;
pub use trainer::{split_lines, Dataset, Metric, Trainer};
