//! Evaluation, diagnostics, configuration and the experiment runner.

pub mod config;
pub mod diagnostics;
pub mod eval;
pub mod experiment;

pub use config::{ExperimentConfig, Method, TrainFileConfig};
pub use diagnostics::{parse_grid, spearman, tau_sweep, weight_norm_profile, TauSweepRow, WeightNormProfile};
pub use eval::{class_correct, evaluate, EvalReport};
pub use experiment::{run_experiment, CellOutcome, ExperimentOutcome, MethodOutcome, TauRecord};
