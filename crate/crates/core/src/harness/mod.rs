// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment orchestration and evaluation protocols.

pub mod config;
pub mod eval;
pub mod figure;
pub mod run;

pub use config::{ExperimentConfig, Profile};
pub use eval::{
    alpha_sweep, epsilon_sigma, per_function_mse, threshold_analysis, AlphaPoint, EpsilonResult,
    EvalConfig, ThresholdRow,
};
pub use figure::{FigureId, FigureSpec, FigureStyle};
pub use run::{derived_seed, rerun_manifest, run_experiment, verbs_for_figure, Manifest, RunSummary, Verb};
