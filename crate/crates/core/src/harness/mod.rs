//! Experiment configuration, execution, sweeps and report rendering.

pub mod config;
pub mod experiment;
pub mod report;
pub mod sweep;

pub use config::{AnnotatorMethod, CleanSpec, ExperimentConfig, MethodSpec, TransitionSource};
pub use experiment::{run_experiment, Diagnostics, ExperimentReport, SCHEMA_VERSION};
pub use report::render_markdown;
pub use sweep::{quadratic_fit, run_sweep, NamedMethod, QuadraticFit, SweepOutcome, SweepRow, SweepSpec};
