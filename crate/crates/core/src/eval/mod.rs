//! Metrics, run configuration, experiment orchestration and reports.

mod config;
mod experiment;
mod metrics;
mod report;

pub use self::config::RunConfig;
pub use self::experiment::{
    check_compatible, evaluate, initial_params, run_experiment, train_model, AblationFlags, Evaluation,
    ExperimentConfig,
};
pub use self::metrics::{accuracy, average_precision};
pub use self::report::{emit_report, FamilyMetrics, MetricsReport, ReportFormat, Scored};
