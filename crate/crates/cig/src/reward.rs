//! Per-step reward decomposition of the trajectory information-gain score.
//!
//! ## Decomposition
//!
//! The trajectory score is `log det(K + ridge * I)` over the `T x T` step
//! kernel. Factoring `K + ridge * I = L L^T` (lower Cholesky) splits the
//! score into per-step terms
//!
//! ```text
//! r_t = 2 * log L[t, t] = log(K[t,t] + ridge - k_<t^T (K_<t + ridge I)^-1 k_<t)
//! ```
//!
//! which telescope exactly back to the total. Each `r_t` only depends on the
//! leading `t x t` block, so the reward at step `t` is causal: truncating the
//! trajectory does not change earlier rewards, bit for bit. `K[t,t]` is the
//! lifelong (pooled-disagreement) part; the subtracted quadratic form is the
//! portion of step `t`'s disagreement already explained by the prefix.
//!
//! ## Variants
//!
//! * `cig_rewards`: the full decomposition.
//! * `no_prefix_rewards`: drops the prefix correction, `log(K[t,t] + ridge)`.
//! * `lifelong_only_rewards`: drops the ridge too, `log K[t,t]`.
//! * `no_trace_reduction_rewards`: skips the trace reduction and factorizes
//!   the dense `Td x Td` deviation covariance, grouping Cholesky pivots into
//!   `d`-sized step blocks. Its per-step sums telescope to
//!   `log det(C + sigma2 I)` with the policy-independent `d * log sigma2`
//!   constant removed per step.
//!
//! ## Verification
//!
//! Closed forms for the duplicated-step kernel, telescoping against the
//! eigenvalue route, the `log(ridge)` floor, diagonal dominance, permutation
//! invariance of the total, and bit-exact truncation causality are all tested
//! below; the wider randomized sweeps live in the verification suite.

use serde::{Deserialize, Serialize};

use crate::error::{CigError, Result};
use crate::kernel::{FullCovariance, KernelMatrix};
use crate::linalg::cholesky_lower;
use crate::stats::spearman;

/// Which decomposition produced a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardVariant {
    Cig,
    CigNoTrace,
    CigNoPrefix,
    CigLifelongOnly,
}

impl RewardVariant {
    pub fn name(self) -> &'static str {
        match self {
            RewardVariant::Cig => "cig",
            RewardVariant::CigNoTrace => "cig_no_trace",
            RewardVariant::CigNoPrefix => "cig_no_prefix",
            RewardVariant::CigLifelongOnly => "cig_lifelong_only",
        }
    }
}

/// Per-step rewards plus their decomposition diagnostics.
///
/// `lifelong[t]` is the kernel diagonal (pooled disagreement of step `t`) and
/// `prefix_explained[t]` the part of `lifelong[t] + ridge` that the prefix
/// already accounts for; both are zero-filled for variants where the quantity
/// does not apply. All vectors share length `T`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardTrace {
    pub variant: RewardVariant,
    pub ridge: f64,
    pub rewards: Vec<f64>,
    pub lifelong: Vec<f64>,
    pub prefix_explained: Vec<f64>,
}

/// One step of a [`RewardTrace`] in serialized form (JSONL row). Steps are
/// 0-based.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardStepRecord {
    pub step: usize,
    pub reward: f64,
    pub lifelong: f64,
    pub prefix_explained: f64,
    pub variant: RewardVariant,
    pub ridge: f64,
}

impl RewardTrace {
    pub fn t(&self) -> usize {
        self.rewards.len()
    }

    pub fn total(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn records(&self) -> Vec<RewardStepRecord> {
        (0..self.t())
            .map(|t| RewardStepRecord {
                step: t,
                reward: self.rewards[t],
                lifelong: self.lifelong[t],
                prefix_explained: self.prefix_explained[t],
                variant: self.variant,
                ridge: self.ridge,
            })
            .collect()
    }
}

/// Causal per-step decomposition of `log det(K + ridge * I)`.
///
/// Accepts `ridge = 0` for kernels that are positive definite on their own;
/// a singular kernel then fails with the first non-positive Cholesky pivot.
/// `T = 0` yields an empty trace.
pub fn cig_rewards(kernel: &KernelMatrix) -> Result<RewardTrace> {
    let t = kernel.t();
    let ridge = kernel.ridge();
    let a = kernel.ridged_row_major();
    let l = cholesky_lower(&a, t)?;
    let mut rewards = Vec::with_capacity(t);
    let mut lifelong = Vec::with_capacity(t);
    let mut prefix_explained = Vec::with_capacity(t);
    for i in 0..t {
        let pivot = l[i * t + i];
        rewards.push(2.0 * pivot.ln());
        let ktt = kernel.diag(i);
        lifelong.push(ktt);
        // The identity prefix = K[t,t] + ridge - L[t,t]^2 avoids forming the
        // quadratic form explicitly. The first step has no prefix.
        prefix_explained.push(if i == 0 { 0.0 } else { ktt + ridge - pivot * pivot });
    }
    Ok(RewardTrace { variant: RewardVariant::Cig, ridge, rewards, lifelong, prefix_explained })
}

/// Ablation: keep the ridge but drop the prefix correction.
///
/// Requires `K[t,t] + ridge > 0` for every step, which holds whenever the
/// ridge is positive.
pub fn no_prefix_rewards(kernel: &KernelMatrix) -> Result<RewardTrace> {
    let t = kernel.t();
    let ridge = kernel.ridge();
    let mut rewards = Vec::with_capacity(t);
    let mut lifelong = Vec::with_capacity(t);
    for i in 0..t {
        let ktt = kernel.diag(i);
        let ridged = ktt + ridge;
        if ridged <= 0.0 || ridged.is_nan() {
            return Err(CigError::NonPositiveDiagonal { step: i });
        }
        rewards.push(ridged.ln());
        lifelong.push(ktt);
    }
    Ok(RewardTrace {
        variant: RewardVariant::CigNoPrefix,
        ridge,
        rewards,
        lifelong,
        prefix_explained: vec![0.0; t],
    })
}

/// Ablation: raw pooled disagreement, `log K[t,t]`, no ridge, no prefix.
///
/// Any step with non-positive diagonal is rejected with its index.
pub fn lifelong_only_rewards(kernel: &KernelMatrix) -> Result<RewardTrace> {
    let t = kernel.t();
    let mut rewards = Vec::with_capacity(t);
    let mut lifelong = Vec::with_capacity(t);
    for i in 0..t {
        let ktt = kernel.diag(i);
        if ktt <= 0.0 || ktt.is_nan() {
            return Err(CigError::NonPositiveDiagonal { step: i });
        }
        rewards.push(ktt.ln());
        lifelong.push(ktt);
    }
    Ok(RewardTrace {
        variant: RewardVariant::CigLifelongOnly,
        ridge: kernel.ridge(),
        rewards,
        lifelong,
        prefix_explained: vec![0.0; t],
    })
}

/// Ablation: no trace reduction. Factorizes the dense `Td x Td` covariance
/// `C + sigma2 * I` and sums `2 log L[i,i]` over each step's `d` pivots,
/// subtracting the policy-independent constant `d * log sigma2` per step.
///
/// Dense materialization is capped; oversize inputs are rejected with the cap
/// value. The trace's `ridge` field records `sigma2`, and `lifelong[t]` the
/// diagonal block trace (which equals the step-kernel diagonal).
pub fn no_trace_reduction_rewards(full: &FullCovariance) -> Result<RewardTrace> {
    let (t, d) = (full.t(), full.d());
    let sigma2 = full.sigma2();
    let td = full.td();
    let c = full.materialize()?;
    let mut a = crate::linalg::to_row_major(&c);
    for i in 0..td {
        a[i * td + i] += sigma2;
    }
    let l = cholesky_lower(&a, td)?;
    let log_sigma2 = sigma2.ln();
    let mut rewards = Vec::with_capacity(t);
    let mut lifelong = Vec::with_capacity(t);
    for step in 0..t {
        let mut acc = 0.0;
        let mut block_trace = 0.0;
        for i in step * d..(step + 1) * d {
            acc += 2.0 * l[i * td + i].ln();
            block_trace += c[(i, i)];
        }
        rewards.push(acc - d as f64 * log_sigma2);
        lifelong.push(block_trace);
    }
    Ok(RewardTrace {
        variant: RewardVariant::CigNoTrace,
        ridge: sigma2,
        rewards,
        lifelong,
        prefix_explained: vec![0.0; t],
    })
}

/// Redundancy diagnostics of a causal trace.
#[derive(Debug, Clone, Serialize)]
pub struct PrefixDiagnostics {
    /// Fraction of each step's pooled disagreement already explained by the
    /// prefix: `prefix_explained[t] / lifelong[t]`, 0 where the diagonal
    /// vanishes.
    pub explained_fraction: Vec<f64>,
    /// Spearman rank correlation between the per-step rewards and the
    /// lifelong diagonal; `None` for traces shorter than two steps.
    pub reward_lifelong_spearman: Option<f64>,
}

/// Summarize how much of each step's disagreement the prefix explained.
/// Only the full causal variant carries the decomposition.
pub fn prefix_diagnostics(trace: &RewardTrace) -> Result<PrefixDiagnostics> {
    if trace.variant != RewardVariant::Cig {
        return Err(CigError::Config(format!(
            "prefix diagnostics require the cig variant, got {}",
            trace.variant.name()
        )));
    }
    let explained_fraction = trace
        .lifelong
        .iter()
        .zip(&trace.prefix_explained)
        .map(|(&ktt, &pe)| if ktt > 0.0 { pe / ktt } else { 0.0 })
        .collect();
    // log(lifelong) is monotone, so ranks match lifelong's ranks directly.
    let reward_lifelong_spearman = spearman(&trace.rewards, &trace.lifelong);
    Ok(PrefixDiagnostics { explained_fraction, reward_lifelong_spearman })
}

/// Running z-score state for reward streams.
///
/// Mean and variance follow an exponential moving average with the given
/// momentum; the first update adopts the batch statistics directly. The
/// standard deviation used for scaling is floored at `1e-8`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizerState {
    pub mean: f64,
    pub var: f64,
    pub momentum: f64,
    pub initialized: bool,
}

impl NormalizerState {
    pub fn new(momentum: f64) -> Self {
        NormalizerState { mean: 0.0, var: 0.0, momentum, initialized: false }
    }

    /// Scale values with the current statistics without touching the state.
    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        let std = self.var.max(0.0).sqrt().max(1e-8);
        raw.iter().map(|r| (r - self.mean) / std).collect()
    }

    /// Fold a batch into the running statistics. Empty batches are ignored.
    pub fn update(&mut self, raw: &[f64]) {
        if raw.is_empty() {
            return;
        }
        let n = raw.len() as f64;
        let batch_mean = raw.iter().sum::<f64>() / n;
        let batch_var = raw.iter().map(|r| (r - batch_mean).powi(2)).sum::<f64>() / n;
        if !self.initialized {
            self.mean = batch_mean;
            self.var = batch_var;
            self.initialized = true;
        } else {
            self.mean = self.momentum * self.mean + (1.0 - self.momentum) * batch_mean;
            self.var = self.momentum * self.var + (1.0 - self.momentum) * batch_var;
        }
    }
}

/// Update the normalizer with the batch, then return the batch scaled by the
/// updated statistics. A batch of identical values therefore normalizes to
/// exactly zero.
pub fn normalize_rewards(raw: &[f64], state: &mut NormalizerState) -> Vec<f64> {
    state.update(raw);
    state.apply(raw)
}
