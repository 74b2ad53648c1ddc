//! Exact full conformal prediction sets for sparse high-order interaction
//! models.
//!
//! A SHIM regresses a response on every product of up to `d` covariates.
//! Because the model is fit by an L1 (or elastic-net) penalty over a tree of
//! patterns, the fit can be traced exactly as the label of a test point
//! varies, which gives conformal sets without a grid over candidate labels.

pub mod conformal;
pub mod datagen;
pub mod error;
mod linalg;
pub mod oracle;
pub mod patterns;
pub mod solver;
pub mod taupath;

pub use conformal::{full_cp, split_cp, ConformalSet, SplitResult};
pub use error::{BudgetKind, Error, Result};
pub use patterns::{CovariateMatrix, Pattern};
pub use solver::{certify_kkt, fit, FitConfig, ModelState};
pub use taupath::{compute_tau_path, Kink, TauPath};
