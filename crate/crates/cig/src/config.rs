//! Experiment configuration: one TOML file describes one environment, a
//! method list, seeds, and the hyperparameter blocks; fan-out produces one
//! run spec per (method, seed).
//!
//! Unknown keys anywhere in the file are hard errors, so a typo cannot
//! silently fall back to a default. Either `method` or `methods` must be
//! present, never both. Omitted block values take the pinned defaults listed
//! on each field.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::env::EnvConfig;
use crate::error::{CigError, Result};
use crate::planner::{Method, RunSpec};

fn default_m() -> usize {
    5
}
fn default_width() -> usize {
    32
}
fn default_lr() -> f64 {
    0.05
}

/// Dynamics ensemble block.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleBlock {
    /// Member count; disagreement needs at least two.
    #[serde(default = "default_m")]
    pub m: usize,
    /// Hidden width of each member network.
    #[serde(default = "default_width")]
    pub width: usize,
    /// SGD-with-momentum learning rate.
    #[serde(default = "default_lr")]
    pub lr: f64,
}

impl Default for EnsembleBlock {
    fn default() -> Self {
        EnsembleBlock { m: default_m(), width: default_width(), lr: default_lr() }
    }
}

fn default_ridge_multiplier() -> f64 {
    1.0
}
fn default_momentum() -> f64 {
    0.99
}

/// Reward shaping block.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardBlock {
    /// Scales the aleatoric ridge sigma^2 * d.
    #[serde(default = "default_ridge_multiplier")]
    pub ridge_multiplier: f64,
    /// EMA momentum of the aleatoric noise estimate.
    #[serde(default = "default_momentum")]
    pub beta_sigma: f64,
    /// EMA momentum of the reward normalizer.
    #[serde(default = "default_momentum")]
    pub norm_momentum: f64,
}

impl Default for RewardBlock {
    fn default() -> Self {
        RewardBlock {
            ridge_multiplier: default_ridge_multiplier(),
            beta_sigma: default_momentum(),
            norm_momentum: default_momentum(),
        }
    }
}

fn default_horizon() -> usize {
    15
}
fn default_n_candidates() -> usize {
    64
}
fn default_temperature() -> f64 {
    0.5
}
fn default_gamma() -> f64 {
    0.99
}
fn default_prefill() -> usize {
    500
}
fn default_train_every() -> usize {
    10
}
fn default_updates_per_train() -> usize {
    5
}
fn default_batch_size() -> usize {
    32
}
fn default_buffer_capacity() -> usize {
    100_000
}
fn default_log_every() -> usize {
    250
}

/// Shooting-planner and training-cadence block.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerBlock {
    /// Imagination horizon (steps per imagined rollout).
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_n_candidates")]
    pub n_candidates: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Uniform-random steps before planning starts.
    #[serde(default = "default_prefill")]
    pub prefill: usize,
    #[serde(default = "default_train_every")]
    pub train_every: usize,
    #[serde(default = "default_updates_per_train")]
    pub updates_per_train: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_buffer_capacity")]
    pub buffer_capacity: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

impl Default for PlannerBlock {
    fn default() -> Self {
        PlannerBlock {
            horizon: default_horizon(),
            n_candidates: default_n_candidates(),
            temperature: default_temperature(),
            gamma: default_gamma(),
            prefill: default_prefill(),
            train_every: default_train_every(),
            updates_per_train: default_updates_per_train(),
            batch_size: default_batch_size(),
            buffer_capacity: default_buffer_capacity(),
            log_every: default_log_every(),
        }
    }
}

fn default_e3b_lambda() -> f64 {
    0.1
}
fn default_apt_k() -> usize {
    12
}
fn default_rnd_width() -> usize {
    32
}
fn default_rnd_out_dim() -> usize {
    16
}

/// Baseline-specific knobs; ignored by methods that do not use them.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselinesBlock {
    /// Inverse-covariance initialization scale of the elliptical bonus.
    #[serde(default = "default_e3b_lambda")]
    pub e3b_lambda: f64,
    /// Neighbor count of the particle-entropy bonus.
    #[serde(default = "default_apt_k")]
    pub apt_k: usize,
    #[serde(default = "default_rnd_width")]
    pub rnd_width: usize,
    #[serde(default = "default_rnd_out_dim")]
    pub rnd_out_dim: usize,
    #[serde(default = "default_lr")]
    pub rnd_lr: f64,
}

impl Default for BaselinesBlock {
    fn default() -> Self {
        BaselinesBlock {
            e3b_lambda: default_e3b_lambda(),
            apt_k: default_apt_k(),
            rnd_width: default_rnd_width(),
            rnd_out_dim: default_rnd_out_dim(),
            rnd_lr: default_lr(),
        }
    }
}

/// One experiment file: an environment, methods, seeds, and blocks.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Single method; mutually exclusive with `methods`.
    pub method: Option<Method>,
    /// Method list; mutually exclusive with `method`.
    pub methods: Option<Vec<Method>>,
    pub seeds: Vec<u64>,
    pub budget_steps: usize,
    pub env: EnvConfig,
    #[serde(default)]
    pub ensemble: EnsembleBlock,
    #[serde(default)]
    pub reward: RewardBlock,
    #[serde(default)]
    pub planner: PlannerBlock,
    #[serde(default)]
    pub baselines: BaselinesBlock,
}

impl ExperimentConfig {
    /// The effective method list, after resolving the `method`/`methods`
    /// exclusivity rule.
    pub fn methods(&self) -> Result<Vec<Method>> {
        match (&self.method, &self.methods) {
            (Some(single), None) => Ok(vec![*single]),
            (None, Some(list)) if !list.is_empty() => Ok(list.clone()),
            (None, Some(_)) => {
                Err(CigError::Config("`methods` must not be empty".to_string()))
            }
            (Some(_), Some(_)) => Err(CigError::Config(
                "`method` and `methods` are mutually exclusive; set exactly one".to_string(),
            )),
            (None, None) => {
                Err(CigError::Config("one of `method` or `methods` is required".to_string()))
            }
        }
    }

    /// Fan out to one validated run spec per (method, seed).
    pub fn to_run_specs(&self) -> Result<Vec<RunSpec>> {
        if self.seeds.is_empty() {
            return Err(CigError::Config("`seeds` must not be empty".to_string()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(CigError::Config(
                "`seeds` contains duplicates; run ids would collide".to_string(),
            ));
        }
        let mut specs = Vec::new();
        for method in self.methods()? {
            for &seed in &self.seeds {
                let spec = RunSpec {
                    method,
                    env: self.env.clone(),
                    seed,
                    budget_steps: self.budget_steps,
                    m: self.ensemble.m,
                    width: self.ensemble.width,
                    lr: self.ensemble.lr,
                    ridge_multiplier: self.reward.ridge_multiplier,
                    beta_sigma: self.reward.beta_sigma,
                    norm_momentum: self.reward.norm_momentum,
                    horizon: self.planner.horizon,
                    n_candidates: self.planner.n_candidates,
                    temperature: self.planner.temperature,
                    gamma: self.planner.gamma,
                    prefill: self.planner.prefill,
                    train_every: self.planner.train_every,
                    updates_per_train: self.planner.updates_per_train,
                    batch_size: self.planner.batch_size,
                    buffer_capacity: self.planner.buffer_capacity,
                    log_every: self.planner.log_every,
                    e3b_lambda: self.baselines.e3b_lambda,
                    apt_k: self.baselines.apt_k,
                    rnd_width: self.baselines.rnd_width,
                    rnd_out_dim: self.baselines.rnd_out_dim,
                    rnd_lr: self.baselines.rnd_lr,
                };
                spec.validate()?;
                specs.push(spec);
            }
        }
        Ok(specs)
    }
}

/// Parse an experiment from TOML text.
pub fn parse_experiment(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| CigError::Config(e.to_string()))
}

/// Load an experiment file.
pub fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CigError::Config(format!("{}: {e}", path.display())))?;
    parse_experiment(&text)
}
