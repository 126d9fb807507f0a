//! Experiment orchestration: configuration, the training loop, output files
//! and run comparison.

mod compare;
mod config;
mod metrics;
mod run;

pub use compare::{compare, epochs_to_threshold, load_run, Comparison, Metric, RunRecord};
pub use config::{
    DatasetConfig, EvaluationConfig, ExperimentConfig, LrSchedule, ModelConfig, Objective, ObjectiveConfig,
    TrainingConfig,
};
pub use metrics::{metrics_to_string, read_metrics, write_metrics, MetricsRecord, Summary, METRICS_HEADER};
pub use run::{
    code_hash, run_experiment, train_to_dir, Experiment, TrainOptions, CHECKPOINT_FILE, CODE_VERSION, METRICS_FILE,
    SUMMARY_FILE,
};
