//! Experiment plumbing: synthetic scenes standing in for a backbone,
//! configuration files, checkpoints, the ablation and depth matrices and
//! their reports.

pub mod checkpoint;
mod config;
mod dataset;
mod gradsuite;
mod report;
mod run;
mod scene;

pub use config::{AblationConfig, RunConfig, RunSection, SweepConfig};
pub use dataset::Dataset;
pub use gradsuite::{check_head, grad_suite, GradCase};
pub use report::{Check, Metrics, Report, ReportKind, RunRow, SummaryRow};
pub use run::{
    build_dataset, evaluate_run, matched_head, run_ablation, run_layer_sweep, run_training, RunResult, CHECKPOINT_FILE,
    METRICS_FILE,
};
pub use scene::{class_signatures, gen_scene, jitter_scene, synth_features, DataConfig, Scene, MAX_OBJECTS};
