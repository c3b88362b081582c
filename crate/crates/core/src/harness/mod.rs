//! Training loop, evaluation, statistics, checkpoints and run logs.

mod checkpoint;
mod compare;
mod config;
pub mod diagnostics;
mod log;
mod stats;
mod train;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use compare::{collect_metric, compare, compare_dirs, render_table, write_csv as write_comparison_csv, Comparison};
pub use config::{parse_pairs, Scale, Schedule, TrainConfig};
pub use log::{read_csv, write_csv, LogRow, LossAccumulator, RowKind, COLUMNS};
pub use stats::{student_t_sf, welch_t_test, WelchResult};
pub use train::{evaluate_with, EvalPolicy, EvalReport, Rollout, Trainer, UpdateCounts};
