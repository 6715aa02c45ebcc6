//! Metrics, persistence and the commands behind the command-line interface.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod metrics;
pub mod records;
pub mod suite;

pub use checkpoint::Checkpoint;
pub use config::{Arch, DataConfig, IdxConfig, ModelConfig, RunConfig, WarpConfig, OUT_DIR_ENV};
pub use metrics::{accuracy, confusion_matrix};
pub use records::{read_metrics, CsvLog, MetricsRow, TimingRow};
pub use suite::{run_gradcheck, CheckResult, GradcheckReport};
