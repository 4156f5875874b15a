//! Density estimation with monotonic triangular network flows.
//!
//! A flow is a stack of units `y = V phi(U x + a) + b` with block-triangular
//! `U` and `V` and positive block diagonals, optionally separated by
//! order-reversing flips. Each unit has a triangular Jacobian, so the exact
//! log-likelihood under a standard-normal base is cheap, and each unit can be
//! inverted dimension by dimension with bisection.
//!
//! Modules:
//! - [`unit`], [`flow`], [`nonlinearity`]: parameters, packed storage, forward pass
//! - [`grad`]: reverse-mode NLL gradients and the finite-difference oracle
//! - [`invert`]: inversion and sampling
//! - [`train`]: Adam, plateau schedule, evaluation
//! - [`data`]: loaders, logit preprocessing, bits/dim, input normalization

pub mod data;
pub mod error;
pub mod flow;
pub mod grad;
pub mod invert;
pub mod linalg;
pub mod nonlinearity;
pub mod train;
pub mod unit;

pub use data::{Dataset, ImageGeom, Normalizer, SplitKind, Splits};
pub use error::{Error, Result};
pub use flow::{flip, nll, Architecture, FlowModel};
pub use grad::{finite_diff_check, l1_subgradient, nll_backward, GradientSet};
pub use invert::{invert_flow, invert_unit, sample};
pub use linalg::Mat;
pub use nonlinearity::{softplus, Nonlinearity};
pub use train::{evaluate, fit, fit_whitened, AdamState, EvalStats, TrainConfig, TrainHistory};
pub use unit::{build_masks, TriUnit};
