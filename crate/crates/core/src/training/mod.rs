//! Frozen-backbone prompt tuning, evaluation and run aggregation.

mod config;
mod metrics;
mod trainer;

pub use config::{lr_at, SelectOn, TrainConfig};
pub use metrics::{aggregate_runs, argmax2, median, Metrics, RunRecord, RunReport, Summary};
pub use trainer::{apply_gradients, evaluate, predict, train, train_step, EpochRecord, History, TrainOutcome};
