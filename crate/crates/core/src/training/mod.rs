//! Dataset construction, AdamW, and the full-batch training loop.

mod config;
mod data;
mod optim;
mod run;

pub use config::{CheckpointSchedule, RegularizerKind, TrainConfig};
pub use data::{build_split, train_size, DataSplit};
pub use optim::{adamw_step, AdamW, OptimizerState};
pub use run::{
    config_hash, read_metrics, resume, run_split, train_run, MetricsRecord, RunDirectory, RunSummary,
    CHECKPOINT_DIR, CONFIG_FILE, EMERGENCY_DIR, LOCK_FILE, METRICS_FILE, METRICS_HEADER, PARTIAL_MARKER,
};
