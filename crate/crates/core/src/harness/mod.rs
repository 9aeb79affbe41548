//! Experiment orchestration: configuration, training runs, telemetry files
//! and rendered reports.

pub mod config;
pub mod experiments;
pub mod report;
pub mod telemetry;

pub use config::{EnvConfig, EnvKind, ExperimentConfig, R0Arm};
pub use experiments::{
    run_compare_rewards, run_gradcheck, run_sweep_r0, run_training, run_verify_theorem, train, CompareReport,
    GradcheckReport, SweepReport, TrainingRun,
};
pub use report::emit_report;
pub use telemetry::StepRecord;
