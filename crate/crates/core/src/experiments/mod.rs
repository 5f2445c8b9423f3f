//! Training runs, sweeps over bits × scale × seeds, and report generation.

mod config;
mod train;

pub use config::{OptimizerConfig, RunConfig, SplitConfig};
pub use train::{
    elbo_summary, load_model, read_json, read_records, train_run, train_to_dir, write_json,
    ElboSummary, FailureRecord, RecordSink, RunFailure, RunOutput, RunRecord, RunStatus,
    RunSummary, Timing, CHECKPOINT_FILE, CONFIG_FILE, FAILURE_FILE, RECORDS_FILE, SUMMARY_FILE,
    TIMING_FILE,
};
pub mod profiles;
pub mod report;
mod svg;
pub mod sweep;

pub use profiles::{calibrate_alphas, AlphaPoint, Profile};
pub use report::{
    build_report, is_monotone_non_decreasing, load_runs, report, write_report, Metric, MetricGrid,
    Report, RunEntry,
};
pub use sweep::{dry_run, plan, sweep, CellStatus, DryRun, SweepConfig, SweepOutcome};
