//! Comparison intrinsic rewards.
//!
//! Every baseline exposes a per-rollout reward interface so the planner can
//! swap scorers by config key:
//!
//! * `p2e_reward`: pooled ensemble disagreement per step, `K[t,t] / d`. By
//!   construction it is exactly the `lifelong` field of a disagreement-kernel
//!   reward trace divided by the feature dimension.
//! * `e3b_reward`: elliptical episodic bonus with a Sherman-Morrison rank-1
//!   inverse update. The running inverse covariance lives in
//!   [`EllipticalState`] and resets to `(1/lambda) I` at rollout boundaries.
//! * `e3b_x_p2e_reward`: product of the two, combining episodic and lifelong
//!   novelty signals.
//! * `apt_reward`: particle entropy proxy, `ln(1 + mean kNN distance)` over a
//!   batch of embeddings.
//! * [`RndPair`]: a frozen random target network plus a trainable predictor;
//!   the reward is the squared prediction residual. The target never trains,
//!   so the residual stays high exactly on states far from the training
//!   distribution.
//!
//! The elliptical state and the RND predictor are single-writer values; the
//! pure functions here are safe to call from any thread.

use nalgebra::{DMatrix, DVector};

use crate::error::{CigError, Result};
use crate::kernel::{build_kernel, DeviationTensor};
use crate::mlp::Mlp;

/// Mean per-dimension predictive variance across the ensemble at each step:
/// `r[t] = (1/d) * sum_i Var_k[mu_k(s_t)_i]`, which with the population (1/M)
/// variance convention is exactly `K[t,t] / d`. Sharing the kernel
/// construction keeps the identity `r[t] * d == K[t,t]` bit-exact.
pub fn p2e_reward(dev: &DeviationTensor) -> Result<Vec<f64>> {
    let kern = build_kernel(dev, 0.0)?;
    let d = dev.d() as f64;
    Ok((0..dev.t()).map(|t| kern.diag(t) / d).collect())
}

/// Running inverse covariance `C_t^{-1}` for the elliptical episodic bonus.
///
/// Invariants: `inv_cov` stays symmetric positive definite (rank-1 downdates
/// of a PD inverse preserve it), and [`EllipticalState::reset`] restores the
/// fresh-episode value `(1/lambda) I`.
#[derive(Debug, Clone)]
pub struct EllipticalState {
    inv_cov: DMatrix<f64>,
    lambda: f64,
    embed_dim: usize,
}

impl EllipticalState {
    /// Fresh state with `inv_cov = (1/lambda) I`. `lambda` must be positive:
    /// it is the ridge of the implicit covariance `lambda I + sum phi phi^T`.
    pub fn new(embed_dim: usize, lambda: f64) -> Result<Self> {
        if lambda <= 0.0 || lambda.is_nan() {
            return Err(CigError::Config(format!(
                "elliptical ridge lambda must be positive, got {lambda}"
            )));
        }
        if embed_dim == 0 {
            return Err(CigError::EmptyInput("elliptical embedding dimension"));
        }
        let mut state = EllipticalState {
            inv_cov: DMatrix::zeros(embed_dim, embed_dim),
            lambda,
            embed_dim,
        };
        state.reset();
        Ok(state)
    }

    /// Restore the episode-boundary value `(1/lambda) I`.
    pub fn reset(&mut self) {
        self.inv_cov = DMatrix::identity(self.embed_dim, self.embed_dim) / self.lambda;
    }

    pub fn inv_cov(&self) -> &DMatrix<f64> {
        &self.inv_cov
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn trace(&self) -> f64 {
        self.inv_cov.trace()
    }
}

/// L2-normalize an embedding, leaving the zero vector untouched (a zero
/// embedding earns a zero bonus and leaves the elliptical state unchanged,
/// which is the natural continuation of the formula).
pub fn l2_normalized(v: &DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        v.clone()
    }
}

/// Elliptical bonus `phi^T C_t^{-1} phi`, followed by the Sherman-Morrison
/// rank-1 update
/// `C_{t+1}^{-1} = C_t^{-1} - (C_t^{-1} phi phi^T C_t^{-1}) / (1 + phi^T C_t^{-1} phi)`.
///
/// The caller is expected to pass an L2-normalized embedding (see
/// [`l2_normalized`]); the update itself is well defined for any finite
/// vector.
pub fn e3b_reward(state: &mut EllipticalState, embedding: &DVector<f64>) -> Result<f64> {
    if embedding.len() != state.embed_dim {
        return Err(CigError::ShapeMismatch {
            expected: format!("embedding of dim {}", state.embed_dim),
            actual: format!("dim {}", embedding.len()),
        });
    }
    if embedding.iter().any(|x| !x.is_finite()) {
        return Err(CigError::NonFiniteEmbedding);
    }
    let u = &state.inv_cov * embedding;
    let bonus = embedding.dot(&u);
    // bonus = phi^T C^{-1} phi >= 0 because C^{-1} is PD, so the denominator
    // never vanishes.
    let denom = 1.0 + bonus;
    state.inv_cov.ger(-1.0 / denom, &u, &u, 1.0);
    Ok(bonus)
}

/// Product of the episodic elliptical bonus and the lifelong disagreement
/// bonus. Both inputs must be finite and non-negative.
pub fn e3b_x_p2e_reward(e3b: f64, p2e: f64) -> f64 {
    debug_assert!(e3b.is_finite() && e3b >= 0.0, "e3b bonus must be finite and >= 0");
    debug_assert!(p2e.is_finite() && p2e >= 0.0, "p2e bonus must be finite and >= 0");
    e3b * p2e
}

/// Particle-based entropy proxy: `r[i] = ln(1 + mean_{j in NN_k(i)} |h_i - h_j|)`
/// with neighbors excluding the point itself. `batch` holds one embedding per
/// row. Requires `1 <= k < B`.
pub fn apt_reward(batch: &DMatrix<f64>, k: usize) -> Result<Vec<f64>> {
    let b = batch.nrows();
    if k == 0 || b <= k {
        return Err(CigError::KnnBatchTooSmall { batch: b, k });
    }
    let mut rewards = Vec::with_capacity(b);
    let mut dists = Vec::with_capacity(b - 1);
    for i in 0..b {
        dists.clear();
        let row_i = batch.row(i);
        for j in 0..b {
            if j != i {
                dists.push((row_i - batch.row(j)).norm());
            }
        }
        dists.sort_unstable_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
        let mean_knn = dists[..k].iter().sum::<f64>() / k as f64;
        rewards.push(mean_knn.ln_1p());
    }
    Ok(rewards)
}

/// Frozen random target network plus a trainable predictor. The reward for a
/// state is the squared residual `|predictor(s) - target(s)|^2`; training the
/// predictor on visited states drives the residual down exactly there, so
/// fresh states keep earning.
#[derive(Debug, Clone)]
pub struct RndPair {
    target: Mlp,
    predictor: Mlp,
    train_steps: usize,
}

impl RndPair {
    /// Both networks share the architecture; the target and predictor get
    /// different seeds so the initial residual is nonzero almost surely.
    pub fn new(in_dim: usize, width: usize, out_dim: usize, seed: u64) -> Self {
        RndPair {
            target: Mlp::new(in_dim, width, out_dim, seed),
            predictor: Mlp::new(in_dim, width, out_dim, seed.wrapping_add(1)),
            train_steps: 0,
        }
    }

    /// Squared prediction residual against the frozen target.
    pub fn reward(&self, state: &DVector<f64>) -> f64 {
        (self.predictor.forward(state) - self.target.forward(state)).norm_squared()
    }

    /// One plain-SGD step fitting the predictor to the frozen target on the
    /// given states. Returns the pre-step batch loss. The target is never
    /// touched.
    pub fn train_batch(&mut self, states: &[DVector<f64>], lr: f64) -> Result<f64> {
        if states.is_empty() {
            return Err(CigError::EmptyBatch);
        }
        let targets: Vec<DVector<f64>> = states.iter().map(|s| self.target.forward(s)).collect();
        let (loss, grads) = self.predictor.loss_and_grad(states, &targets);
        if !loss.is_finite() {
            return Err(CigError::NonFiniteLoss { member: 0 });
        }
        let mut params = self.predictor.flat_params();
        for (p, g) in params.iter_mut().zip(grads.flat()) {
            *p -= lr * g;
        }
        self.predictor.set_flat_params(&params);
        self.train_steps += 1;
        Ok(loss)
    }

    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    /// FNV-1a hash over the target's parameter bits; the freeze contract says
    /// this never changes after construction.
    pub fn target_param_hash(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.target.flat_params() {
            for byte in p.to_bits().to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        hash
    }
}
