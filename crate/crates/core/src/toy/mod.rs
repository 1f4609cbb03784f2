//! Desk-scale laboratory for the full transfer flow.
//!
//! Trains tiny feed-forward regressors on synthetic language × ability
//! tasks with masked gradient updates, drives the real pipeline
//! operations over real checkpoint files, and measures whether the merge
//! improves the untrained (ability, target-language) pair.

mod experiment;
mod model;
mod task;

pub use experiment::{run_transfer_experiment, ExperimentReport, ReportRow, ToyConfig};
pub use model::{
    batch_gradients, batch_loss, train, ToyGradients, ToyModel, HIDDEN_DIM, INPUT_DIM,
    PARAM_COUNT, TENSOR_SHAPES,
};
pub use task::{evaluate, evaluate_with, gen_tasks, Mixture, Target, TaskSet, ToyTask, GENERAL_OFFSET, GENERAL_SCALE};
