//! Collaborative-uncertainty regression for multi-agent, multi-modal
//! trajectory forecasting.
//!
//! The crate bundles everything needed to train and evaluate models that
//! predict a full agent-by-agent covariance alongside their trajectory
//! means:
//!
//! - [`tensor`]: a small reverse-mode autodiff engine and optimisers.
//! - [`stats`]: Gaussian, exponential and multivariate Laplace sampling and
//!   densities, plus the modified Bessel function of the second kind.
//! - [`datagen`]: the synthetic Laplace toy dataset and multi-modal scenes.
//! - [`nets`]: the permutation-equivariant encoder, mean, auxiliary and
//!   covariance heads, and uncertainty-based mode selection.
//! - [`objectives`]: Laplace likelihood losses, the auxiliary uncertainty
//!   loss and covariance recovery.
//! - [`metrics`]: toy-problem metrics, KL divergences, forecasting metrics
//!   and the stochasticity score.
//! - [`harness`]: run configuration, training loops, ablation grids and
//!   report emission.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod datagen;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod nets;
pub mod objectives;
pub mod rng;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
