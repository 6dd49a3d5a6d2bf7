//! Experiment orchestration: configuration, metrics, trial runner and plots.

pub mod config;
pub mod experiment;
pub mod metrics;
pub mod plot;

pub use config::{Algorithm, ExperimentConfig, PointConfig, Sweep, SweepVariable};
pub use experiment::{
    infer, median, run_algorithm, run_experiment, summarize, write_summary, Estimate, ResultRow, SummaryRow, TrialSetup,
    CSV_HEADER,
};
pub use metrics::{naive_estimate, relative_error};
pub use plot::{emit_plots, render_svg, series, Series};
