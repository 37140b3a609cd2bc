//! Intrinsic rewards from ensemble disagreement, scored as conditional
//! information gain over imagined trajectories.
//!
//! The pipeline: an ensemble of dynamics models produces per-step prediction
//! deviations; deviations reduce to a step-by-step kernel matrix; a ridged
//! log-determinant of that kernel scores a whole trajectory; the Cholesky
//! factorization splits the score into causal per-step rewards that discount
//! redundancy against the already-rewarded prefix. Supporting parts: ablation
//! reward variants, classic intrinsic-reward baselines, small vector-feature
//! environments, a random-shooting planner, a numerical verification suite,
//! and an experiment harness.

pub mod aleatoric;
pub mod baselines;
pub mod config;
pub mod env;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod mlp;
pub mod oracle;
pub mod planner;
pub mod reward;
pub mod runner;
pub mod stats;

pub use error::{CigError, Result};
