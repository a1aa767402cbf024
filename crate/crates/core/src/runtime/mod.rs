//! Run configuration, checkpoints, the metrics stream and the command
//! drivers behind the `duet` binary.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod runner;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, RngState};
pub use config::{default_config, load_config, parse_config, parse_config_with, ConfigError, Overrides, Preset, RunConfig, Variant};
pub use metrics::{read_metrics, LineKind, MetricsLine, MetricsWriter};
pub use runner::{ablate_run, ablation_cells, eval_run, eval_set, export_run, train_run, Layout, RunError, TrainOptions, TrainSummary};
