//! Pessimistic model-based offline policy learning for finite-horizon,
//! history-dependent dynamic treatment regimes.
//!
//! The crate is organised bottom-up:
//!
//! - [`dtr`]: histories, trajectories, the [`DtrModel`] and [`Policy`] traits,
//!   rollouts and Monte-Carlo value estimation.
//! - [`basis`]: B-spline bases, tensor-product state-history features and the
//!   block-structured transition feature map.
//! - [`linear`] / [`gp`]: transition estimators with their uncertainty
//!   quantifiers.
//! - [`pessimism`]: the penalized ("modified") model built from an estimate.
//! - [`policy`]: the soft-max sieve policy class.
//! - [`optimizer`]: the actor-critic training loop.
//! - [`baselines`], [`simenv`], [`eval`]: the DP oracle, DTR Q-learning, the
//!   three-stage simulation environment and policy evaluation.
//!
//! Stages are indexed from zero throughout the API: a `K`-stage problem has
//! decision stages `0..K` and `K + 1` states per trajectory.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod basis;
pub mod dtr;
pub mod error;
pub mod eval;
pub mod gp;
pub mod linear;
pub mod optimizer;
pub mod pessimism;
pub mod policy;
pub mod rng;
pub mod simenv;

mod linalg;

pub use basis::{ActionHistoryIndex, BSplineBasis1D, PhiFeature, StageFeatureMap, TensorBasis};
pub use dtr::{
    sample_trajectory, value_mc, DtrModel, DtrSpec, History, Policy, StageSpec, StateBox,
    Trajectory, ValueEstimate,
};
pub use error::{PolarError, Result};
pub use policy::SoftmaxSievePolicy;
pub use rng::StreamRng;
