//! Core library for extracting ability-specific weights from trained
//! checkpoints and transferring them across languages by weight
//! arithmetic.
//!
//! The pipeline operates on single-file checkpoint tensor stores:
//!
//! 1. [`importance`] scores neurons by value change and materializes
//!    top-k key-neuron masks.
//! 2. [`extract`] decomposes trained checkpoints into ability- and
//!    language-specific weights.
//! 3. [`combine`] folds per-language weights into one multi-lingual
//!    weight.
//! 4. [`select`] ranks parameter tensors by similarity between ability
//!    and multi-lingual weights and keeps the low-similarity tail.
//! 5. [`merge`] assembles the final checkpoint from the base model and
//!    the selected weights.
//!
//! [`toy`] hosts a desk-scale laboratory that runs the whole flow on tiny
//! feed-forward regressors, and [`inspect`] provides per-layer similarity
//! diagnostics.

pub mod combine;
pub mod delta;
pub mod error;
pub mod extract;
pub mod importance;
pub mod inspect;
pub mod merge;
pub mod pattern;
pub mod select;
pub mod store;
pub mod toy;

pub use error::{Error, Result};
pub use store::{DType, StoreBuilder, StoreWriter, TensorData, TensorMeta, TensorSpec, TensorStore};

/// Hyper-parameter defaults used when a caller does not override them.
pub mod defaults {
    /// Coefficient on the ability+language delta in extraction.
    pub const ALPHA: f64 = 0.8;
    /// Coefficient on the language delta in extraction.
    pub const BETA: f64 = 0.2;
    /// Coefficient on the ability weight inside the selected tensor set.
    pub const GAMMA: f64 = 0.2;
    /// Coefficient on the multi-lingual weight inside the selected set.
    pub const ETA: f64 = 1.0;
    /// Key-neuron ratio (percent) for mask construction.
    pub const K1_PERCENT: f64 = 5.0;
    /// Tensor-selection tail ratio (percent) for mathematical tasks.
    pub const K2_PERCENT_MATH: f64 = 80.0;
    /// Tensor-selection tail ratio (percent) for scientific tasks.
    pub const K2_PERCENT_SCIENCE: f64 = 60.0;
}
