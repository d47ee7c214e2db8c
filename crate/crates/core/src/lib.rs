//! Bayesian joint matrix decomposition of multi-source data.
//!
//! C data matrices `X_c` (M×N_c) are modeled as `X_c = W H_c + ε_c` with a
//! shared basis `W` under a Laplace prior, column-stochastic coefficients
//! `H_c` under a Dirichlet prior, and Gaussian noise whose variance σ²_c is
//! inferred per source under an inverse-gamma prior.
//!
//! Two engines are provided:
//! * [`map_solver::fit_map`]: block-coordinate MAP on the scale-mixture
//!   reformulation, with coefficient columns solved by the interior-point
//!   routine in [`simplex_qp`];
//! * [`advi::fit_advi`]: mean-field Gaussian variational inference in an
//!   unconstrained parameterization with reparameterized Monte Carlo
//!   gradients.
//!
//! [`datagen`] builds the planted-structure synthetic benchmark,
//! [`evaluation`] scores recovered coefficients and selects features, and
//! [`experiment`] wires restarts, the concatenated ablation and σ sweeps.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advi;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod map_solver;
pub mod model;
pub mod par;
pub mod simplex_qp;

pub use error::{BjmdError, Result};
pub use model::{
    bjmd_log_joint, map_objective, reconstruct, validate, FitReport, Hyperparams, ModelState, MultiViewData,
    SolverConfig, WRegularizer,
};
