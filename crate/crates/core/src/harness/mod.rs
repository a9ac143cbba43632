//! Configuration, checkpoints, CLI, and experiment orchestration.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod pipeline;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, QuantExtras,
    CHECKPOINT_SCHEMA_VERSION,
};
pub use config::{streams, ExperimentConfig};
pub use pipeline::{
    ablate_groups, ablate_strategy, run_calibrate, run_eval, run_sample, run_train,
    GroupAblationReport, GroupAblationRow, StrategyAblationReport, StrategyAblationRow,
};
