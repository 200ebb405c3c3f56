//! Experiment harness: configuration, data, the training loop and reports.

mod config;
mod report;
mod tasks;
mod train;

pub use config::{Preset, TrainingConfig};
pub use report::{
    emit_plot_data, meta_test_with, run_ablation_frequency, run_meta_test, report_walltime, AblationReport, AblationRow,
    AblationSummary, MetaTestReport, MetaTestRow, PlotData, PlotRow, PlotSummaryRow, WalltimeReport, WalltimeRow,
};
pub use tasks::TaskData;
pub use train::{evaluate_tasks, run_training, EvalRow, RunArtifacts, METRIC_CSVS, RUN_JSON};
