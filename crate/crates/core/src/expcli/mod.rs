//! Experiment configuration, datasets, run management, ablation grids and
//! the command line.

mod ablation;
pub mod cli;
mod config;
mod data;
mod evaluate;
pub mod presets;
mod run;

pub use ablation::{run_ablation_grid, AblationAxis, AblationCell, AblationRow, AblationTable, CellChange};
pub use config::{ExperimentConfig, Precision, RuntimeConfig};
pub use data::*;
pub use evaluate::{evaluate_equivariance, evaluate_linear, LinearEvalRecord, EQUIVARIANCE_STEM, LINEAR_EVAL_FILE};
pub use presets::{preset, preset_names, preset_source};
pub use run::*;
