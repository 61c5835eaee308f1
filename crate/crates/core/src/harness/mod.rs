//! Experiment orchestration: metrics, policy rosters, sweeps and diagnostics.

pub mod diagnose;
mod experiment;
pub mod metrics;
pub mod report;
mod tta;

pub use diagnose::{diagnose_shift, moment_deviation_curve, Histogram, Moments, ShiftDiagnostic};
pub use experiment::{
    evaluate_entry, evaluate_roster, mean_over_targets, mean_std, metric_name, protocol_partition, run_experiment, score,
    standard_roster, sweep_steps_and_batch, train_repetitions, ExperimentConfig, ExperimentRecord, ExperimentReport, Repetition,
    ResultRow, RosterEntry, Sampler, SweepCell, SweepReport,
};
pub use tta::test_time_augment;

/// Fusion weight used by the steps and batch-size sweep.
pub const SWEEP_BETA: f64 = 0.9;
