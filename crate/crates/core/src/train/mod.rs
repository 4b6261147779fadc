//! Optimizer, learning-rate schedule, training loop, checkpoints, reports
//! and gradient checks.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod curves;
pub mod evaluate;
pub mod gradcheck;
pub mod schedule;
pub mod trainer;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, EpochRecord, Progress};
pub use config::{DataSource, TrainConfig};
pub use evaluate::{collect_runs, evaluate_checkpoint, merge_reports, write_report, EvalReport};
pub use gradcheck::{gradcheck, gradcheck_with, GradReport};
pub use schedule::{lr_schedule, Plateau};
pub use trainer::{evaluate_samples, load_data, loss_spec, RunOutcome, Trainer};
