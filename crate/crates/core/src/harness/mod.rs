//! Experiment plumbing: configuration, dataset generation, training,
//! evaluation and reports.

pub mod compare;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod gradcheck;
pub mod train;

pub use compare::{compare_targets, format_report, TargetScore};
pub use config::{DatasetConfig, EvalConfig, ExperimentConfig, MetricKind, ModelSection, TrainingConfig};
pub use dataset::{generate, load_split, Manifest, SceneData, SceneRecord, Split};
pub use evaluate::{evaluate, summarize, Baseline, EvalOptions, MetricsRow, SummaryRow};
pub use train::{train, train_step, Example, LrSchedule, TrainOutputs, TrainReport};
