//! Synthetic tasks, evaluation and guidance sweeps.

mod eval;
pub mod sudoku;
mod tasks;

pub use eval::{
    ablate, evaluate, evaluate_with, reports_to_csv, AblationGrid, AblationTable, EvalOptions, EvalReport,
    InstanceOutcome, CSV_HEADER,
};
pub use tasks::{Dataset, Instance, TaskSpec, MASK_TOKEN};
