//! L1-regularized debiased doubly-robust M-estimation with outcomes missing at random.
//!
//! The crate is organized bottom-up:
//!
//! * [`numkit`]: dense matrices, Cholesky, RNG streams, normal quantiles.
//! * [`solvers`]: weighted lasso and L1-penalized logistic regression, λ paths, CV and BIC.
//! * [`kernel`]: Nadaraya–Watson smoothing and bandwidth selection.
//! * [`nuisance`]: propensity and outcome models.
//! * [`ddr`]: cross-fitting, pseudo outcomes and the penalized DDR fit.
//! * [`inference`]: precision estimates, desparsification and confidence intervals.
//! * [`simulate`]: simulation designs and the target θ₀.
//! * [`harness`]: replicated experiments and report files.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod ddr;
pub mod error;
pub mod harness;
pub mod inference;
pub mod kernel;
pub mod nuisance;
pub mod numkit;
pub mod par;
pub mod simulate;
pub mod solvers;

pub use error::{Error, Result};
pub use par::Execution;
