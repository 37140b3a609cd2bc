//! Model-based exploration agent.
//!
//! The agent loop is: act in the environment, append the transition to a
//! replay buffer, and at a fixed cadence train the dynamics ensemble and
//! refresh the aleatoric/normalizer statistics. Actions come from random
//! shooting: sample candidate action sequences, roll each out through the
//! ensemble-mean dynamics ([`imagine`]), score the imagined rollout with the
//! configured intrinsic reward ([`Scorer`]), and commit to a candidate by a
//! softmax over discounted normalized scores ([`select_action`]).
//!
//! Random shooting stands in for a learned actor: it consumes the per-step
//! rewards through discounted rollout scores, exercising exactly the credit
//! structure the causal decomposition provides, without a trainable policy
//! confounding reward comparisons.
//!
//! One run owns its environment, buffer, model, and normalizer; independent
//! runs share nothing mutable. All randomness flows from per-purpose
//! ChaCha streams derived from the run seed in a fixed order, which is what
//! makes reruns byte-identical.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aleatoric::{AleatoricEstimate, SIGMA2_FLOOR};
use crate::baselines::{
    apt_reward, e3b_reward, e3b_x_p2e_reward, l2_normalized, p2e_reward, EllipticalState, RndPair,
};
use crate::ensemble::{EnsembleModel, TransitionBatch};
use crate::env::{episode_entropy, CoverageRecord, Env, EnvConfig, EnvKind};
use crate::error::{CigError, Result};
use crate::io::{Event, SummaryRow};
use crate::kernel::{build_full_covariance_gram, build_kernel, compute_deviations};
use crate::reward::{
    cig_rewards, lifelong_only_rewards, no_prefix_rewards, no_trace_reduction_rewards,
    NormalizerState,
};
use crate::stats::Welford;

/// Imagined states beyond this norm abort the rollout (with the diverging
/// step kept).
pub const DIVERGENCE_NORM: f64 = 1e6;

/// Intrinsic-reward method selecting the rollout scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cig,
    CigNoPrefix,
    CigLifelongOnly,
    CigNoTrace,
    P2e,
    E3b,
    E3bXP2e,
    Apt,
    RndLike,
}

pub const ALL_METHODS: [Method; 9] = [
    Method::Cig,
    Method::CigNoPrefix,
    Method::CigLifelongOnly,
    Method::CigNoTrace,
    Method::P2e,
    Method::E3b,
    Method::E3bXP2e,
    Method::Apt,
    Method::RndLike,
];

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Cig => "cig",
            Method::CigNoPrefix => "cig_no_prefix",
            Method::CigLifelongOnly => "cig_lifelong_only",
            Method::CigNoTrace => "cig_no_trace",
            Method::P2e => "p2e",
            Method::E3b => "e3b",
            Method::E3bXP2e => "e3b_x_p2e",
            Method::Apt => "apt",
            Method::RndLike => "rnd_like",
        }
    }
}

/// FIFO transition store with uniform without-replacement sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    transitions: VecDeque<(DVector<f64>, DVector<f64>, DVector<f64>)>,
    capacity: usize,
    insertion_count: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<ReplayBuffer> {
        if capacity == 0 {
            return Err(CigError::Config("replay buffer capacity must be >= 1".to_string()));
        }
        Ok(ReplayBuffer { transitions: VecDeque::new(), capacity, insertion_count: 0 })
    }

    pub fn push(&mut self, state: DVector<f64>, action: DVector<f64>, next_state: DVector<f64>) {
        if self.transitions.len() == self.capacity {
            self.transitions.pop_front();
        }
        self.transitions.push_back((state, action, next_state));
        self.insertion_count += 1;
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn insertion_count(&self) -> usize {
        self.insertion_count
    }

    pub fn iter(
        &self,
    ) -> impl Iterator<Item = &(DVector<f64>, DVector<f64>, DVector<f64>)> + '_ {
        self.transitions.iter()
    }

    /// Uniform sample without replacement within the batch; the batch size is
    /// clipped to the current length.
    pub fn sample(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<TransitionBatch> {
        if self.is_empty() {
            return Err(CigError::EmptyBatch);
        }
        let amount = batch_size.min(self.transitions.len());
        let picked = rand::seq::index::sample(rng, self.transitions.len(), amount);
        let mut batch = TransitionBatch {
            states: Vec::with_capacity(amount),
            actions: Vec::with_capacity(amount),
            next_states: Vec::with_capacity(amount),
        };
        for idx in picked.iter() {
            let (s, a, s2) = &self.transitions[idx];
            batch.states.push(s.clone());
            batch.actions.push(a.clone());
            batch.next_states.push(s2.clone());
        }
        Ok(batch)
    }
}

/// One-hot action encoding for the dynamics model input.
pub fn one_hot(action: usize, n_actions: usize) -> Result<DVector<f64>> {
    if action >= n_actions {
        return Err(CigError::InvalidAction { action, count: n_actions });
    }
    let mut v = DVector::zeros(n_actions);
    v[action] = 1.0;
    Ok(v)
}

/// A rollout propagated through the ensemble-mean dynamics, with every
/// member's prediction recorded at every step for deviation computation.
#[derive(Debug, Clone)]
pub struct ImaginedRollout {
    pub start_state: DVector<f64>,
    /// The consumed prefix of the requested action sequence (shorter than
    /// requested iff the rollout diverged).
    pub actions: Vec<usize>,
    /// `steps + 1` states; `states[t+1]` is the ensemble mean after
    /// `actions[t]`.
    pub states: Vec<DVector<f64>>,
    /// One `steps x d` matrix per member.
    pub member_predictions: Vec<DMatrix<f64>>,
    pub diverged: bool,
}

impl ImaginedRollout {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }
}

/// Propagate `start` through the ensemble mean along the action sequence.
/// Deterministic given (parameters, start, actions). If an imagined state
/// exceeds [`DIVERGENCE_NORM`], the rollout keeps that step and stops.
pub fn imagine(
    model: &EnsembleModel,
    start: &DVector<f64>,
    actions: &[usize],
) -> Result<ImaginedRollout> {
    if actions.is_empty() {
        return Err(CigError::EmptyInput("imagined action sequence"));
    }
    let m = model.m();
    let d = model.state_dim();
    let mut states = vec![start.clone()];
    let mut per_member: Vec<Vec<DVector<f64>>> = vec![Vec::with_capacity(actions.len()); m];
    let mut used = Vec::with_capacity(actions.len());
    let mut diverged = false;
    for &action in actions {
        let a = one_hot(action, model.action_dim())?;
        let current = states.last().expect("states starts non-empty").clone();
        let mut mean = DVector::zeros(d);
        for (k, rows) in per_member.iter_mut().enumerate() {
            let pred = model.predict_member(k, &current, &a)?;
            mean += &pred;
            rows.push(pred);
        }
        mean /= m as f64;
        used.push(action);
        let overflow = mean.norm() > DIVERGENCE_NORM;
        states.push(mean);
        if overflow {
            diverged = true;
            break;
        }
    }
    let steps = used.len();
    let member_predictions = per_member
        .into_iter()
        .map(|rows| DMatrix::from_fn(steps, d, |t, i| rows[t][i]))
        .collect();
    Ok(ImaginedRollout {
        start_state: start.clone(),
        actions: used,
        states,
        member_predictions,
        diverged,
    })
}

/// Per-step rewards for one rollout, plus the kernel diagnostics where the
/// method defines them.
#[derive(Debug, Clone)]
pub struct ScoredRollout {
    pub rewards: Vec<f64>,
    pub lifelong: Option<Vec<f64>>,
    pub prefix_explained: Option<Vec<f64>>,
}

/// Rollout scorer for one method. Kernel methods are stateless; the
/// elliptical state is rebuilt per rollout (episodic bonus over the imagined
/// prefix); the RND predictor persists and trains at the buffer cadence.
#[derive(Debug, Clone)]
pub enum Scorer {
    Cig,
    CigNoPrefix,
    CigLifelongOnly,
    CigNoTrace,
    P2e,
    E3b { lambda: f64 },
    E3bXP2e { lambda: f64 },
    Apt { k: usize },
    RndLike(Box<RndPair>),
}

impl Scorer {
    pub fn new(
        method: Method,
        feature_dim: usize,
        e3b_lambda: f64,
        apt_k: usize,
        rnd_width: usize,
        rnd_out_dim: usize,
        rnd_seed: u64,
    ) -> Result<Scorer> {
        match method {
            Method::Cig => Ok(Scorer::Cig),
            Method::CigNoPrefix => Ok(Scorer::CigNoPrefix),
            Method::CigLifelongOnly => Ok(Scorer::CigLifelongOnly),
            Method::CigNoTrace => Ok(Scorer::CigNoTrace),
            Method::P2e => Ok(Scorer::P2e),
            Method::E3b | Method::E3bXP2e => {
                // Probe construction validates lambda up front.
                EllipticalState::new(feature_dim, e3b_lambda)?;
                if method == Method::E3b {
                    Ok(Scorer::E3b { lambda: e3b_lambda })
                } else {
                    Ok(Scorer::E3bXP2e { lambda: e3b_lambda })
                }
            }
            Method::Apt => {
                if apt_k == 0 {
                    return Err(CigError::Config("baselines.apt_k must be >= 1".to_string()));
                }
                Ok(Scorer::Apt { k: apt_k })
            }
            Method::RndLike => {
                Ok(Scorer::RndLike(Box::new(RndPair::new(
                    feature_dim,
                    rnd_width,
                    rnd_out_dim,
                    rnd_seed,
                ))))
            }
        }
    }

    pub fn method(&self) -> Method {
        match self {
            Scorer::Cig => Method::Cig,
            Scorer::CigNoPrefix => Method::CigNoPrefix,
            Scorer::CigLifelongOnly => Method::CigLifelongOnly,
            Scorer::CigNoTrace => Method::CigNoTrace,
            Scorer::P2e => Method::P2e,
            Scorer::E3b { .. } => Method::E3b,
            Scorer::E3bXP2e { .. } => Method::E3bXP2e,
            Scorer::Apt { .. } => Method::Apt,
            Scorer::RndLike(_) => Method::RndLike,
        }
    }

    /// Score the rollout. `ridge` feeds the kernel methods; `sigma2` is the
    /// dense-covariance noise scale for the no-trace ablation. Baselines that
    /// score states use the successor state of each step.
    pub fn score_rollout(
        &self,
        rollout: &ImaginedRollout,
        ridge: f64,
        sigma2: f64,
    ) -> Result<ScoredRollout> {
        let successors = &rollout.states[1..];
        match self {
            Scorer::Cig => {
                let dev = compute_deviations(&rollout.member_predictions)?;
                let trace = cig_rewards(&build_kernel(&dev, ridge)?)?;
                Ok(ScoredRollout {
                    rewards: trace.rewards,
                    lifelong: Some(trace.lifelong),
                    prefix_explained: Some(trace.prefix_explained),
                })
            }
            Scorer::CigNoPrefix => {
                let dev = compute_deviations(&rollout.member_predictions)?;
                let trace = no_prefix_rewards(&build_kernel(&dev, ridge)?)?;
                Ok(ScoredRollout {
                    rewards: trace.rewards,
                    lifelong: Some(trace.lifelong),
                    prefix_explained: None,
                })
            }
            Scorer::CigLifelongOnly => {
                let dev = compute_deviations(&rollout.member_predictions)?;
                let trace = lifelong_only_rewards(&build_kernel(&dev, 0.0)?)?;
                Ok(ScoredRollout {
                    rewards: trace.rewards,
                    lifelong: Some(trace.lifelong),
                    prefix_explained: None,
                })
            }
            Scorer::CigNoTrace => {
                let dev = compute_deviations(&rollout.member_predictions)?;
                let full = build_full_covariance_gram(&dev, sigma2)?;
                let trace = no_trace_reduction_rewards(&full)?;
                Ok(ScoredRollout {
                    rewards: trace.rewards,
                    lifelong: Some(trace.lifelong),
                    prefix_explained: None,
                })
            }
            Scorer::P2e => {
                let dev = compute_deviations(&rollout.member_predictions)?;
                Ok(ScoredRollout {
                    rewards: p2e_reward(&dev)?,
                    lifelong: None,
                    prefix_explained: None,
                })
            }
            Scorer::E3b { lambda } => {
                let mut state = EllipticalState::new(rollout.start_state.len(), *lambda)?;
                let mut rewards = Vec::with_capacity(successors.len());
                for s in successors {
                    rewards.push(e3b_reward(&mut state, &l2_normalized(s))?);
                }
                Ok(ScoredRollout { rewards, lifelong: None, prefix_explained: None })
            }
            Scorer::E3bXP2e { lambda } => {
                let dev = compute_deviations(&rollout.member_predictions)?;
                let p2e = p2e_reward(&dev)?;
                let mut state = EllipticalState::new(rollout.start_state.len(), *lambda)?;
                let mut rewards = Vec::with_capacity(successors.len());
                for (s, p) in successors.iter().zip(&p2e) {
                    let e3b = e3b_reward(&mut state, &l2_normalized(s))?;
                    rewards.push(e3b_x_p2e_reward(e3b, *p));
                }
                Ok(ScoredRollout { rewards, lifelong: None, prefix_explained: None })
            }
            Scorer::Apt { k } => {
                let b = successors.len();
                // A single particle has no neighbors; score it zero.
                let rewards = if b >= 2 {
                    let d = rollout.start_state.len();
                    let batch = DMatrix::from_fn(b, d, |i, j| successors[i][j]);
                    apt_reward(&batch, (*k).min(b - 1))?
                } else {
                    vec![0.0; b]
                };
                Ok(ScoredRollout { rewards, lifelong: None, prefix_explained: None })
            }
            Scorer::RndLike(pair) => Ok(ScoredRollout {
                rewards: successors.iter().map(|s| pair.reward(s)).collect(),
                lifelong: None,
                prefix_explained: None,
            }),
        }
    }
}

/// Softmax choice over scores. Temperature 0 is an argmax with the first
/// index winning ties.
pub fn softmax_select(scores: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    assert!(!scores.is_empty(), "softmax over empty scores");
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate().skip(1) {
            if s > scores[best] {
                best = i;
            }
        }
        return best;
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    scores.len() - 1
}

/// Shooting-planner knobs for one action selection.
#[derive(Debug, Clone, Copy)]
pub struct SelectParams {
    /// Imagination horizon T.
    pub horizon: usize,
    pub n_candidates: usize,
    pub temperature: f64,
    pub gamma: f64,
    /// Kernel ridge for the disagreement methods.
    pub ridge: f64,
    /// Noise scale for the dense-covariance ablation.
    pub sigma2: f64,
}

#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub action: usize,
    pub chosen_index: usize,
    /// Discounted normalized score of the chosen candidate.
    pub score: f64,
    pub scores: Vec<f64>,
    /// Raw (unnormalized) scoring detail of the chosen candidate.
    pub chosen: ScoredRollout,
}

/// Random shooting: sample `n_candidates` uniform action sequences, score
/// each imagined rollout by the discounted sum of normalized per-step
/// rewards, and pick by softmax. The normalizer is read-only here; its state
/// advances only at the training cadence.
pub fn select_action(
    model: &EnsembleModel,
    scorer: &Scorer,
    state: &DVector<f64>,
    params: &SelectParams,
    normalizer: &NormalizerState,
    rng: &mut ChaCha8Rng,
) -> Result<SelectionOutcome> {
    if params.n_candidates == 0 {
        return Err(CigError::Config("planner.n_candidates must be >= 1".to_string()));
    }
    if params.horizon == 0 {
        return Err(CigError::Config("planner.horizon must be >= 1".to_string()));
    }
    let n_actions = model.action_dim();
    let mut candidates = Vec::with_capacity(params.n_candidates);
    for _ in 0..params.n_candidates {
        let actions: Vec<usize> =
            (0..params.horizon).map(|_| rng.gen_range(0..n_actions)).collect();
        candidates.push(actions);
    }
    let mut scores = Vec::with_capacity(params.n_candidates);
    let mut scored = Vec::with_capacity(params.n_candidates);
    let mut first_actions = Vec::with_capacity(params.n_candidates);
    for actions in &candidates {
        let rollout = imagine(model, state, actions)?;
        let detail = scorer.score_rollout(&rollout, params.ridge, params.sigma2)?;
        let normalized = normalizer.apply(&detail.rewards);
        let mut total = 0.0;
        let mut discount = 1.0;
        for r in &normalized {
            total += discount * r;
            discount *= params.gamma;
        }
        scores.push(total);
        scored.push(detail);
        first_actions.push(rollout.actions[0]);
    }
    let chosen_index = softmax_select(&scores, params.temperature, rng);
    Ok(SelectionOutcome {
        action: first_actions[chosen_index],
        chosen_index,
        score: scores[chosen_index],
        scores,
        chosen: scored.swap_remove(chosen_index),
    })
}

/// Everything one run needs, flattened out of the experiment config.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub method: Method,
    pub env: EnvConfig,
    pub seed: u64,
    pub budget_steps: usize,
    pub m: usize,
    pub width: usize,
    pub lr: f64,
    pub ridge_multiplier: f64,
    pub beta_sigma: f64,
    pub norm_momentum: f64,
    pub horizon: usize,
    pub n_candidates: usize,
    pub temperature: f64,
    pub gamma: f64,
    pub prefill: usize,
    pub train_every: usize,
    pub updates_per_train: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub log_every: usize,
    pub e3b_lambda: f64,
    pub apt_k: usize,
    pub rnd_width: usize,
    pub rnd_out_dim: usize,
    pub rnd_lr: f64,
}

impl RunSpec {
    pub fn run_id(&self) -> String {
        format!("{}_{}_s{}", self.method.name(), self.env.label(), self.seed)
    }

    /// Field-by-field validation with the offending field named.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CigError::Config(msg));
        if self.m < 2 {
            return bad(format!("ensemble.m must be >= 2, got {}", self.m));
        }
        if self.width == 0 {
            return bad("ensemble.width must be >= 1".to_string());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("ensemble.lr must be finite and >= 0, got {}", self.lr));
        }
        if self.ridge_multiplier <= 0.0 || self.ridge_multiplier.is_nan() {
            return bad(format!(
                "reward.ridge_multiplier must be > 0, got {}",
                self.ridge_multiplier
            ));
        }
        if !(0.0..1.0).contains(&self.beta_sigma) {
            return bad(format!("reward.beta_sigma must be in [0,1), got {}", self.beta_sigma));
        }
        if !(0.0..1.0).contains(&self.norm_momentum) {
            return bad(format!(
                "reward.norm_momentum must be in [0,1), got {}",
                self.norm_momentum
            ));
        }
        if self.horizon == 0 {
            return bad("planner.horizon must be >= 1".to_string());
        }
        if self.n_candidates == 0 {
            return bad("planner.n_candidates must be >= 1".to_string());
        }
        if self.temperature < 0.0 || self.temperature.is_nan() {
            return bad(format!("planner.temperature must be >= 0, got {}", self.temperature));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("planner.gamma must be in (0,1], got {}", self.gamma));
        }
        if self.prefill == 0 {
            return bad("planner.prefill must be >= 1".to_string());
        }
        if self.train_every == 0 {
            return bad("planner.train_every must be >= 1".to_string());
        }
        if self.updates_per_train == 0 {
            return bad("planner.updates_per_train must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            return bad("planner.batch_size must be >= 1".to_string());
        }
        if self.buffer_capacity == 0 {
            return bad("planner.buffer_capacity must be >= 1".to_string());
        }
        if self.log_every == 0 {
            return bad("planner.log_every must be >= 1".to_string());
        }
        if self.budget_steps == 0 {
            return bad("budget_steps must be >= 1".to_string());
        }
        Ok(())
    }
}

/// Artifacts of one finished run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub run_id: String,
    pub method: Method,
    pub env_label: String,
    pub seed: u64,
    pub events: Vec<Event>,
    pub summary: Vec<SummaryRow>,
    pub final_coverage: f64,
    pub final_mean_reward: f64,
    pub steps_to_90: Option<usize>,
    pub mean_episode_entropy: f64,
}

fn milestone_name(kind: EnvKind) -> String {
    match kind {
        EnvKind::OpenRoom => "far_corner".to_string(),
        EnvKind::MultiRoom => "last_room".to_string(),
        EnvKind::Corridor => "corridor_end".to_string(),
    }
}

/// The full exploration loop for one (method, env, seed) cell.
///
/// Steps 1..=prefill act uniformly at random; from the first post-prefill
/// step the loop trains every `train_every` steps (including immediately on
/// the first one) and plans every step. The budget counts every environment
/// step, prefill included.
pub fn run_exploration(spec: &RunSpec) -> Result<RunOutput> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let env_seed: u64 = master.gen();
    let model_seed: u64 = master.gen();
    let policy_seed: u64 = master.gen();
    let buffer_seed: u64 = master.gen();
    let rnd_seed: u64 = master.gen();

    let mut env_cfg = spec.env.clone();
    env_cfg.seed = env_cfg.seed.wrapping_add(env_seed);
    let mut env = Env::new(&env_cfg)?;
    let d = env.feature_dim();
    let n_actions = env.n_actions();
    let mut model = EnsembleModel::new(d, n_actions, spec.width, spec.m, model_seed)?;
    let mut scorer = Scorer::new(
        spec.method,
        d,
        spec.e3b_lambda,
        spec.apt_k,
        spec.rnd_width,
        spec.rnd_out_dim,
        rnd_seed,
    )?;
    let mut policy_rng = ChaCha8Rng::seed_from_u64(policy_seed);
    let mut buffer_rng = ChaCha8Rng::seed_from_u64(buffer_seed);
    let mut buffer = ReplayBuffer::new(spec.buffer_capacity)?;
    let mut aleatoric = AleatoricEstimate::new(spec.beta_sigma);
    let mut normalizer = NormalizerState::new(spec.norm_momentum);
    let mut coverage = CoverageRecord::new(env.total_reachable())?;

    let mut state = env.reset();
    coverage.visit(env.cell_id());
    let mut visit_counts: BTreeMap<usize, u64> = BTreeMap::new();
    *visit_counts.entry(env.cell_id()).or_insert(0) += 1;

    let run_id = spec.run_id();
    let env_label = spec.env.label();
    let mut events: Vec<Event> = Vec::new();
    let mut summary: Vec<SummaryRow> = Vec::new();
    let mut episode_index = 0usize;
    let mut episode_steps = 0usize;
    let mut entropy_sum = 0.0;
    let mut entropy_count = 0usize;
    let mut returns = Welford::default();
    let mut pending_norm: Vec<f64> = Vec::new();
    let mut milestone_logged = env.milestone_reached();
    let mut steps_to_90 = if coverage.coverage() >= 0.9 { Some(0) } else { None };

    let mut win_reward = (0.0, 0usize);
    let mut win_lifelong = (0.0, 0usize);
    let mut win_prefix = (0.0, 0usize);
    let mut last_mean_reward = 0.0;

    for step in 1..=spec.budget_steps {
        if step > spec.prefill && (step - spec.prefill - 1).is_multiple_of(spec.train_every) {
            let mut last_batch: Option<TransitionBatch> = None;
            for _ in 0..spec.updates_per_train {
                let batch = buffer.sample(spec.batch_size, &mut buffer_rng)?;
                model.train_step(&batch, spec.lr)?;
                last_batch = Some(batch);
            }
            if let Some(batch) = last_batch {
                let residuals = model.mean_residuals(&batch)?;
                aleatoric.update(&residuals)?;
            }
            if !pending_norm.is_empty() {
                normalizer.update(&pending_norm);
                pending_norm.clear();
            }
            if let Scorer::RndLike(pair) = &mut scorer {
                let batch = buffer.sample(spec.batch_size, &mut buffer_rng)?;
                pair.train_batch(&batch.states, spec.rnd_lr)?;
            }
        }

        let action = if step <= spec.prefill {
            policy_rng.gen_range(0..n_actions)
        } else {
            let params = SelectParams {
                horizon: spec.horizon,
                n_candidates: spec.n_candidates,
                temperature: spec.temperature,
                gamma: spec.gamma,
                ridge: aleatoric.ridge_value(d, spec.ridge_multiplier),
                sigma2: if aleatoric.sigma2 > 0.0 { aleatoric.sigma2 } else { SIGMA2_FLOOR },
            };
            let outcome =
                select_action(&model, &scorer, &state, &params, &normalizer, &mut policy_rng)?;
            returns.push(outcome.score);
            for &r in &outcome.chosen.rewards {
                win_reward.0 += r;
                win_reward.1 += 1;
                pending_norm.push(r);
            }
            if let Some(values) = &outcome.chosen.lifelong {
                for &v in values {
                    win_lifelong.0 += v;
                    win_lifelong.1 += 1;
                }
            }
            if let Some(values) = &outcome.chosen.prefix_explained {
                for &v in values {
                    win_prefix.0 += v;
                    win_prefix.1 += 1;
                }
            }
            outcome.action
        };

        let (next_state, done) = env.step(action)?;
        buffer.push(state, one_hot(action, n_actions)?, next_state.clone());
        coverage.visit(env.cell_id());
        coverage.note_step();
        *visit_counts.entry(env.cell_id()).or_insert(0) += 1;
        episode_steps += 1;
        state = next_state;

        if steps_to_90.is_none() && coverage.coverage() >= 0.9 {
            steps_to_90 = Some(step);
        }
        if !milestone_logged && env.milestone_reached() {
            milestone_logged = true;
            events.push(Event::Milestone { name: milestone_name(env.kind()), step });
        }
        if done {
            let counts: Vec<u64> = visit_counts.values().copied().collect();
            let entropy = episode_entropy(&counts)?;
            events.push(Event::Episode {
                episode: episode_index,
                env_steps: episode_steps,
                entropy,
            });
            entropy_sum += entropy;
            entropy_count += 1;
            episode_index += 1;
            episode_steps = 0;
            visit_counts.clear();
            state = env.reset();
            coverage.visit(env.cell_id());
            *visit_counts.entry(env.cell_id()).or_insert(0) += 1;
        }

        if step % spec.log_every == 0 || step == spec.budget_steps {
            let mean_reward =
                if win_reward.1 > 0 { win_reward.0 / win_reward.1 as f64 } else { 0.0 };
            let mean_lifelong =
                if win_lifelong.1 > 0 { win_lifelong.0 / win_lifelong.1 as f64 } else { 0.0 };
            let mean_prefix =
                if win_prefix.1 > 0 { win_prefix.0 / win_prefix.1 as f64 } else { 0.0 };
            let mean_entropy =
                if entropy_count > 0 { entropy_sum / entropy_count as f64 } else { 0.0 };
            events.push(Event::Log {
                step,
                coverage: coverage.coverage(),
                mean_reward,
                sigma2: aleatoric.sigma2,
                mean_lifelong,
                mean_prefix_explained: mean_prefix,
                return_std: returns.std(),
            });
            summary.push(SummaryRow {
                run_id: run_id.clone(),
                method: spec.method.name().to_string(),
                env: env_label.clone(),
                seed: spec.seed,
                env_steps: step,
                coverage: coverage.coverage(),
                mean_reward,
                sigma2: aleatoric.sigma2,
                mean_lifelong,
                mean_prefix_explained: mean_prefix,
                episode_entropy: mean_entropy,
            });
            last_mean_reward = mean_reward;
            win_reward = (0.0, 0);
            win_lifelong = (0.0, 0);
            win_prefix = (0.0, 0);
            if step == spec.budget_steps {
                break;
            }
        }
    }

    Ok(RunOutput {
        run_id,
        method: spec.method,
        env_label,
        seed: spec.seed,
        final_coverage: coverage.coverage(),
        final_mean_reward: last_mean_reward,
        steps_to_90,
        mean_episode_entropy: if entropy_count > 0 {
            entropy_sum / entropy_count as f64
        } else {
            0.0
        },
        events,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_spec(method: Method) -> RunSpec {
        RunSpec {
            method,
            env: EnvConfig {
                kind: EnvKind::Corridor,
                size: 8,
                rooms: 3,
                horizon: None,
                noisy_tv: false,
                distractor_dims: 4,
                seed: 0,
            },
            seed: 1,
            budget_steps: 500,
            m: 2,
            width: 8,
            lr: 0.05,
            ridge_multiplier: 1.0,
            beta_sigma: 0.99,
            norm_momentum: 0.99,
            horizon: 3,
            n_candidates: 2,
            temperature: 0.5,
            gamma: 0.99,
            prefill: 200,
            train_every: 10,
            updates_per_train: 2,
            batch_size: 16,
            buffer_capacity: 2000,
            log_every: 100,
            e3b_lambda: 0.1,
            apt_k: 12,
            rnd_width: 8,
            rnd_out_dim: 4,
            rnd_lr: 0.05,
        }
    }

    fn fresh_model(d: usize, n_actions: usize, seed: u64) -> EnsembleModel {
        EnsembleModel::new(d, n_actions, 8, 3, seed).unwrap()
    }

    #[test]
    fn replay_buffer_evicts_oldest_first() {
        let mut buf = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            let v = DVector::from_element(1, i as f64);
            buf.push(v.clone(), v.clone(), v);
        }
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.insertion_count(), 5);
        let kept: Vec<f64> = buf.iter().map(|(s, _, _)| s[0]).collect();
        assert_eq!(kept, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn replay_buffer_samples_without_replacement() {
        let mut buf = ReplayBuffer::new(16).unwrap();
        for i in 0..10 {
            let v = DVector::from_element(1, i as f64);
            buf.push(v.clone(), v.clone(), v);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = buf.sample(10, &mut rng).unwrap();
        let mut seen: Vec<f64> = batch.states.iter().map(|s| s[0]).collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(seen, (0..10).map(|i| i as f64).collect::<Vec<_>>());
        let small = buf.sample(4, &mut rng).unwrap();
        let mut vals: Vec<f64> = small.states.iter().map(|s| s[0]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals.dedup();
        assert_eq!(vals.len(), 4, "sampling must not repeat within a batch");
        let empty = ReplayBuffer::new(4).unwrap();
        assert!(matches!(empty.sample(2, &mut rng), Err(CigError::EmptyBatch)));
    }

    #[test]
    fn one_hot_validates_and_encodes() {
        let v = one_hot(2, 4).unwrap();
        assert_eq!(v.as_slice(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(matches!(one_hot(4, 4), Err(CigError::InvalidAction { action: 4, count: 4 })));
    }

    #[test]
    fn constant_map_ensemble_earns_only_the_ridge_floor() {
        // All-zero parameters make every member the constant-zero map, the
        // degenerate fixed point: states collapse, deviations vanish, and the
        // causal rewards are exactly log(ridge) at every step.
        let mut model = fresh_model(3, 2, 40);
        for k in 0..model.m() {
            let zeros = vec![0.0; model.member(k).n_params()];
            model.member_mut(k).set_flat_params(&zeros);
        }
        let start = DVector::from_vec(vec![0.4, -0.2, 0.9]);
        let rollout = imagine(&model, &start, &[0, 1, 0, 1]).unwrap();
        assert!(!rollout.diverged);
        assert_eq!(rollout.steps(), 4);
        for s in &rollout.states[1..] {
            assert_eq!(s.norm(), 0.0);
        }
        let scored = Scorer::Cig.score_rollout(&rollout, 0.2, 0.1).unwrap();
        for (r, (l, p)) in scored.rewards.iter().zip(
            scored.lifelong.as_ref().unwrap().iter().zip(scored.prefix_explained.as_ref().unwrap()),
        ) {
            assert_relative_eq!(*r, 0.2f64.ln(), epsilon = 1e-12);
            assert_eq!(*l, 0.0);
            // ridge - sqrt(ridge)^2 is not a bitwise no-op.
            assert!(p.abs() <= 1e-15);
        }
    }

    #[test]
    fn single_step_rollout_scores_like_no_prefix() {
        let model = fresh_model(4, 3, 41);
        let start = DVector::from_vec(vec![0.1, 0.5, -0.3, 0.8]);
        let rollout = imagine(&model, &start, &[2]).unwrap();
        let cig = Scorer::Cig.score_rollout(&rollout, 0.05, 0.05).unwrap();
        let no_prefix = Scorer::CigNoPrefix.score_rollout(&rollout, 0.05, 0.05).unwrap();
        assert_eq!(cig.rewards.len(), 1);
        assert_relative_eq!(cig.rewards[0], no_prefix.rewards[0], max_relative = 1e-12);
        assert_eq!(cig.prefix_explained.as_ref().unwrap()[0], 0.0);
    }

    #[test]
    fn planner_rewards_match_standalone_pipeline_bit_exactly() {
        let model = fresh_model(5, 2, 42);
        let start = DVector::from_vec(vec![0.3, -0.1, 0.7, 0.2, -0.6]);
        let rollout = imagine(&model, &start, &[0, 1, 1, 0, 1, 0]).unwrap();
        let scored = Scorer::Cig.score_rollout(&rollout, 0.07, 0.05).unwrap();
        let dev = compute_deviations(&rollout.member_predictions).unwrap();
        let trace = cig_rewards(&build_kernel(&dev, 0.07).unwrap()).unwrap();
        assert_eq!(scored.rewards.len(), trace.rewards.len());
        for (a, b) in scored.rewards.iter().zip(&trace.rewards) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn diverging_dynamics_truncate_with_flag() {
        let mut model = fresh_model(3, 2, 43);
        for k in 0..model.m() {
            let mlp = model.member_mut(k);
            let mut params = vec![0.0; mlp.n_params()];
            // The bias of the output layer is the last slice of the flat
            // layout; a huge constant output diverges immediately.
            let n = params.len();
            for p in params[n - 3..].iter_mut() {
                *p = 1e7;
            }
            mlp.set_flat_params(&params);
        }
        let start = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        let rollout = imagine(&model, &start, &[0, 1, 0, 1, 0]).unwrap();
        assert!(rollout.diverged);
        assert_eq!(rollout.steps(), 1, "the diverging step itself is kept");
        assert_eq!(rollout.states.len(), 2);
        assert_eq!(rollout.member_predictions[0].nrows(), 1);
    }

    #[test]
    fn argmax_selection_breaks_ties_on_first_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(softmax_select(&[1.0, 3.0, 2.0], 0.0, &mut rng), 1);
        assert_eq!(softmax_select(&[2.0, 2.0, 2.0], 0.0, &mut rng), 0);
    }

    #[test]
    fn softmax_frequency_matches_the_two_candidate_sigmoid() {
        let gap = 0.8;
        let tau = 0.7;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 10_000;
        let mut hits = 0;
        for _ in 0..n {
            if softmax_select(&[0.0, gap], tau, &mut rng) == 1 {
                hits += 1;
            }
        }
        let p = 1.0 / (1.0 + (-gap / tau).exp());
        let freq = hits as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (freq - p).abs() <= 3.0 * se,
            "frequency {freq} vs expected {p} (3se = {:.4})",
            3.0 * se
        );
    }

    #[test]
    fn imagined_states_track_the_linear_teacher_powers() {
        use rand::Rng as _;
        let a = DMatrix::from_fn(3, 3, |i, j| if i == j { 0.4 } else { 0.05 });
        let mut model = EnsembleModel::new(3, 2, 24, 2, 44).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        for step in 0..4000 {
            let mut batch = TransitionBatch {
                states: Vec::with_capacity(32),
                actions: Vec::with_capacity(32),
                next_states: Vec::with_capacity(32),
            };
            for _ in 0..32 {
                let s = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
                let act = one_hot(rng.gen_range(0..2), 2).unwrap();
                batch.next_states.push(&a * &s);
                batch.states.push(s);
                batch.actions.push(act);
            }
            let lr = if step < 3000 { 0.1 } else { 0.02 };
            model.train_step(&batch, lr).unwrap();
        }
        // Held-out RMSE of the ensemble mean.
        let mut se = 0.0;
        let n_eval = 64;
        for _ in 0..n_eval {
            let s = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let act = one_hot(0, 2).unwrap();
            let mut mean = DVector::zeros(3);
            for k in 0..2 {
                mean += model.predict_member(k, &s, &act).unwrap();
            }
            mean /= 2.0;
            se += (&a * &s - mean).norm_squared();
        }
        let rmse = (se / (n_eval * 3) as f64).sqrt();
        let start = DVector::from_vec(vec![0.5, -0.5, 0.25]);
        let rollout = imagine(&model, &start, &[0, 1, 0, 1, 0]).unwrap();
        let mut truth = start.clone();
        for (t, s) in rollout.states[1..].iter().enumerate() {
            truth = &a * &truth;
            let err = (s - &truth).norm();
            let bound = 10.0 * rmse * (t + 1) as f64;
            assert!(err <= bound, "step {t}: drift {err} exceeds {bound} (rmse {rmse})");
        }
    }

    #[test]
    fn spec_validation_names_offending_fields() {
        let mut spec = tiny_spec(Method::Cig);
        spec.m = 1;
        match spec.validate() {
            Err(CigError::Config(msg)) => assert!(msg.contains("ensemble.m")),
            other => panic!("expected config error, got {other:?}"),
        }
        let mut spec = tiny_spec(Method::Cig);
        spec.temperature = -0.1;
        match spec.validate() {
            Err(CigError::Config(msg)) => assert!(msg.contains("temperature")),
            other => panic!("expected config error, got {other:?}"),
        }
        let mut spec = tiny_spec(Method::Cig);
        spec.gamma = 0.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn zero_training_budget_is_pure_random_prefill() {
        let mut spec = tiny_spec(Method::Cig);
        spec.budget_steps = 200;
        spec.prefill = 200;
        let out = run_exploration(&spec).unwrap();
        for row in &out.summary {
            assert_eq!(row.mean_reward, 0.0, "no selection may happen during prefill");
            assert_eq!(row.sigma2, 0.0, "no training may happen during prefill");
        }
        assert!(out.final_coverage > 0.0);
        let again = run_exploration(&spec).unwrap();
        assert_eq!(out.events, again.events);
    }

    #[test]
    fn reruns_are_bit_identical_and_logs_monotone() {
        let spec = tiny_spec(Method::Cig);
        let a = run_exploration(&spec).unwrap();
        let b = run_exploration(&spec).unwrap();
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.events, b.events);
        let steps: Vec<usize> = a.summary.iter().map(|r| r.env_steps).collect();
        assert!(steps.windows(2).all(|w| w[0] < w[1]), "env_steps must increase");
        let coverages: Vec<f64> = a.summary.iter().map(|r| r.coverage).collect();
        assert!(coverages.windows(2).all(|w| w[0] <= w[1]), "coverage must not shrink");
        assert_eq!(*steps.last().unwrap(), spec.budget_steps);
        assert_eq!(a.run_id, "cig_corridor8_s1");
        // Post-prefill logging reflects actual planning.
        assert!(a.summary.last().unwrap().sigma2 > 0.0);
    }

    #[test]
    fn different_seeds_diverge() {
        let spec_a = tiny_spec(Method::Cig);
        let mut spec_b = tiny_spec(Method::Cig);
        spec_b.seed = 2;
        let a = run_exploration(&spec_a).unwrap();
        let b = run_exploration(&spec_b).unwrap();
        assert_ne!(a.summary, b.summary);
    }

    #[test]
    fn every_method_runs_end_to_end() {
        for method in ALL_METHODS {
            let mut spec = tiny_spec(method);
            spec.budget_steps = 320;
            spec.prefill = 150;
            let out = run_exploration(&spec)
                .unwrap_or_else(|e| panic!("method {} failed: {e}", method.name()));
            assert_eq!(out.summary.last().unwrap().env_steps, 320);
            assert!(out.final_coverage > 0.0);
        }
    }
}
