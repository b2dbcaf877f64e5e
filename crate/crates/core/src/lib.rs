//! Smoothness-penalized Tucker decomposition for 3-way (time x measure x
//! subject) tensors with missing entries.
//!
//! The pieces, bottom-up:
//!
//! * [`tensor`]: masked dense tensors, unfoldings, mode products;
//! * [`smoothing`]: second-difference penalty and `A = I + lambda D^T D`;
//! * [`decomposer`]: the block-coordinate solver and imputation loop;
//! * [`postprocess`]: identifiability rotations, explained variance and
//!   effect curves;
//! * [`tuning`]: entry-wise k-fold cross-validation and grid search;
//! * [`sim`]: synthetic-truth simulation harness and loss metrics;
//! * [`io`]: long-format ingestion, quality filtering, normalization and
//!   CSV/JSON artifacts.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod decomposer;
pub mod error;
pub mod io;
pub mod linalg;
pub mod postprocess;
pub mod serde_matrix;
pub mod sim;
pub mod smoothing;
pub mod tensor;
pub mod tuning;

pub use decomposer::{
    fit_complete, fit_missing, fit_missing_full, fit_penalized_components, impute_step, objective,
    recover_l, solve_core, update_r, update_u, Decomposition, FitOptions, FitOutput, Initializer,
    Variant, WarmStart,
};
pub use error::{Error, Result};
pub use smoothing::{Boundary, SmoothingOperator};
pub use tensor::{Dims, FrontalSlice, MaskedTensor, Tensor3};
