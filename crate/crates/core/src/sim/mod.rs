//! Configuration-driven experiments and their CSV/JSON output.

pub mod config;
pub mod output;
pub mod run;

pub use config::{ExperimentConfig, Method, SweepKind, UeMode};
pub use output::{
    emit_results, parse_csv, parse_json, render, to_csv, to_json, OutputFormat, CSV_COLUMNS,
};
pub use run::{
    compute_rmse, run_sweep, run_trial, stage_rmse, CurvePoint, Design, SweepOutput, TrialResult,
};
