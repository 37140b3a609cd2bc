//! Desk-scale exploration environments.
//!
//! Three kinds, each with an optional action-gated distractor ("noisy TV")
//! toggle:
//!
//! * `open_room`: a single size x size room, one-hot cell features. A sanity
//!   environment for unit tests and quick runs.
//! * `multi_room`: several rooms in a row joined by single-cell doors, so
//!   coverage requires committing to directed excursions.
//! * `corridor`: a chain whose far end is reachable only through many action
//!   sequences sharing long common prefixes, which makes within-rollout
//!   redundancy the dominant effect. Features are a compact 8-dim encoding
//!   (position scalar, 5 sign bits, 2 fixed per-cell tags) so model training
//!   stays cheap.
//!
//! Contracts shared by all kinds: task feature dims are deterministic
//! functions of the discrete state; distractor dims exist only when
//! `noisy_tv` is set and are resampled exactly when the trigger action
//! fires; episodes truncate at the horizon and never terminate early; the
//! reachable-cell count is computed by BFS at construction and is the
//! coverage denominator.
//!
//! Each environment instance is exclusively owned by one run; parallelism is
//! across runs.

use std::collections::BTreeSet;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CigError, Result};

/// Highest corridor length representable by the 5 sign-bit feature dims.
pub const MAX_CORRIDOR_LENGTH: usize = 32;
/// Fixed seed for the per-cell corridor tags. Deliberately independent of the
/// environment seed: task features must be identical across seeds so that
/// seed-to-seed diffs isolate the distractor dims.
const CORRIDOR_TAG_SEED: u64 = 0x7461_675f;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    OpenRoom,
    MultiRoom,
    Corridor,
}

/// Environment block of the experiment config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    /// Room side length for the grids, chain length for the corridor.
    pub size: usize,
    /// Number of rooms in a row (multi_room only).
    #[serde(default = "default_rooms")]
    pub rooms: usize,
    /// Episode truncation. Defaults to 100 for grids and 50 for the corridor.
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub noisy_tv: bool,
    /// Number of trigger-gated distractor dims appended when `noisy_tv`.
    #[serde(default = "default_distractor_dims")]
    pub distractor_dims: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_rooms() -> usize {
    3
}

fn default_distractor_dims() -> usize {
    4
}

impl EnvConfig {
    pub fn horizon(&self) -> usize {
        self.horizon.unwrap_or(match self.kind {
            EnvKind::OpenRoom | EnvKind::MultiRoom => 100,
            EnvKind::Corridor => 50,
        })
    }

    /// Short label used in run identifiers, e.g. `corridor28_tv`.
    pub fn label(&self) -> String {
        let base = match self.kind {
            EnvKind::OpenRoom => format!("open_room{}", self.size),
            EnvKind::MultiRoom => format!("multi_room{}x{}", self.rooms, self.size),
            EnvKind::Corridor => format!("corridor{}", self.size),
        };
        if self.noisy_tv {
            format!("{base}_tv")
        } else {
            base
        }
    }
}

/// Grid layout shared by `open_room` and `multi_room`.
#[derive(Debug, Clone)]
struct GridLayout {
    width: usize,
    height: usize,
    open: Vec<bool>,
}

impl GridLayout {
    fn open_room(size: usize) -> GridLayout {
        GridLayout { width: size, height: size, open: vec![true; size * size] }
    }

    /// `rooms` rooms of side `size` in a row. Between adjacent rooms sits a
    /// wall column with a single door at the middle row.
    fn multi_room(rooms: usize, size: usize) -> GridLayout {
        let width = rooms * size + (rooms - 1);
        let height = size;
        let door_row = size / 2;
        let mut open = vec![true; width * height];
        for x in 0..width {
            if x % (size + 1) == size {
                for y in 0..height {
                    if y != door_row {
                        open[y * width + x] = false;
                    }
                }
            }
        }
        GridLayout { width, height, open }
    }

    fn is_open(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height && self.open[y * self.width + x]
    }
}

/// A running environment instance. Constructed from [`EnvConfig`] via
/// [`Env::new`]; owns its RNG (used only for distractor dims).
#[derive(Debug, Clone)]
pub struct Env {
    config: EnvConfig,
    horizon: usize,
    grid: Option<GridLayout>,
    /// Fixed pseudo-random per-cell tags for the corridor encoding (2 per
    /// cell), identical across environment seeds.
    corridor_tags: Vec<f64>,
    reachable: BTreeSet<usize>,
    pos: (usize, usize),
    step_in_episode: usize,
    distractors: Vec<f64>,
    rng: ChaCha8Rng,
}

impl Env {
    pub fn new(config: &EnvConfig) -> Result<Env> {
        if config.size < 2 {
            return Err(CigError::Config(format!("env size must be >= 2, got {}", config.size)));
        }
        match config.kind {
            EnvKind::Corridor if config.size > MAX_CORRIDOR_LENGTH => {
                return Err(CigError::Config(format!(
                    "corridor length {} exceeds the {MAX_CORRIDOR_LENGTH}-cell encoding limit",
                    config.size
                )));
            }
            EnvKind::MultiRoom if config.rooms < 2 => {
                return Err(CigError::Config(format!(
                    "multi_room needs at least 2 rooms, got {}",
                    config.rooms
                )));
            }
            _ => {}
        }
        if config.noisy_tv && config.distractor_dims == 0 {
            return Err(CigError::Config(
                "noisy_tv requires at least one distractor dim".to_string(),
            ));
        }
        if config.horizon() == 0 {
            return Err(CigError::Config("horizon must be >= 1".to_string()));
        }

        let grid = match config.kind {
            EnvKind::OpenRoom => Some(GridLayout::open_room(config.size)),
            EnvKind::MultiRoom => Some(GridLayout::multi_room(config.rooms, config.size)),
            EnvKind::Corridor => None,
        };
        let corridor_tags = if config.kind == EnvKind::Corridor {
            let mut tag_rng = ChaCha8Rng::seed_from_u64(CORRIDOR_TAG_SEED);
            (0..2 * config.size).map(|_| tag_rng.gen_range(-1.0..1.0)).collect()
        } else {
            Vec::new()
        };

        let mut env = Env {
            config: config.clone(),
            horizon: config.horizon(),
            grid,
            corridor_tags,
            reachable: BTreeSet::new(),
            pos: (0, 0),
            step_in_episode: 0,
            distractors: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        env.reachable = env.bfs_reachable();
        if env.config.noisy_tv {
            env.distractors =
                (0..env.config.distractor_dims).map(|_| env.rng.gen_range(-1.0..1.0)).collect();
        }
        Ok(env)
    }

    /// Breadth-first search over the movement actions from the start cell.
    fn bfs_reachable(&self) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut queue = std::collections::VecDeque::new();
        seen.insert(self.cell_id_at((0, 0)));
        queue.push_back((0usize, 0usize));
        while let Some(cell) = queue.pop_front() {
            for action in self.movement_actions() {
                let next = self.apply_move(cell, action);
                if seen.insert(self.cell_id_at(next)) {
                    queue.push_back(next);
                }
            }
        }
        seen
    }

    fn movement_actions(&self) -> std::ops::Range<usize> {
        // The trigger action is always last and never moves.
        0..self.n_actions() - 1
    }

    fn apply_move(&self, (x, y): (usize, usize), action: usize) -> (usize, usize) {
        match &self.grid {
            Some(layout) => {
                let (nx, ny) = match action {
                    0 => (x.wrapping_sub(1), y),
                    1 => (x + 1, y),
                    2 => (x, y.wrapping_sub(1)),
                    3 => (x, y + 1),
                    _ => (x, y),
                };
                if layout.is_open(nx, ny) {
                    (nx, ny)
                } else {
                    (x, y)
                }
            }
            None => match action {
                0 => (x.saturating_sub(1), y),
                1 => ((x + 1).min(self.config.size - 1), y),
                _ => (x, y),
            },
        }
    }

    pub fn kind(&self) -> EnvKind {
        self.config.kind
    }

    /// Left/right(/up/down) plus the trigger no-op, in both clean and noisy
    /// variants so action spaces stay comparable.
    pub fn n_actions(&self) -> usize {
        match self.config.kind {
            EnvKind::OpenRoom | EnvKind::MultiRoom => 5,
            EnvKind::Corridor => 3,
        }
    }

    pub fn trigger_action(&self) -> usize {
        self.n_actions() - 1
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn feature_dim(&self) -> usize {
        let task = match &self.grid {
            Some(layout) => layout.width * layout.height,
            None => 8,
        };
        if self.config.noisy_tv {
            task + self.config.distractor_dims
        } else {
            task
        }
    }

    /// Task dims precede distractor dims in the feature vector.
    pub fn task_dim(&self) -> usize {
        self.feature_dim() - if self.config.noisy_tv { self.config.distractor_dims } else { 0 }
    }

    pub fn total_reachable(&self) -> usize {
        self.reachable.len()
    }

    fn cell_id_at(&self, (x, y): (usize, usize)) -> usize {
        match &self.grid {
            Some(layout) => y * layout.width + x,
            None => x,
        }
    }

    /// Discrete identifier of the current cell; the coverage unit.
    pub fn cell_id(&self) -> usize {
        self.cell_id_at(self.pos)
    }

    /// Success proxy: last room entered (multi_room), far end reached
    /// (corridor), far corner reached (open_room).
    pub fn milestone_reached(&self) -> bool {
        let (x, y) = self.pos;
        match self.config.kind {
            EnvKind::MultiRoom => x >= (self.config.rooms - 1) * (self.config.size + 1),
            EnvKind::Corridor => x == self.config.size - 1,
            EnvKind::OpenRoom => x == self.config.size - 1 && y == self.config.size - 1,
        }
    }

    pub fn features(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.feature_dim());
        match &self.grid {
            Some(_) => v[self.cell_id()] = 1.0,
            None => {
                let x = self.pos.0;
                let len = self.config.size;
                v[0] = 2.0 * x as f64 / (len - 1) as f64 - 1.0;
                for bit in 0..5 {
                    v[1 + bit] = if (x >> bit) & 1 == 1 { 1.0 } else { -1.0 };
                }
                v[6] = self.corridor_tags[2 * x];
                v[7] = self.corridor_tags[2 * x + 1];
            }
        }
        if self.config.noisy_tv {
            let task = self.task_dim();
            for (i, d) in self.distractors.iter().enumerate() {
                v[task + i] = *d;
            }
        }
        v
    }

    /// Start a fresh episode: position back to the start cell, step counter
    /// cleared. Distractor dims persist (they change only on trigger).
    pub fn reset(&mut self) -> DVector<f64> {
        self.pos = (0, 0);
        self.step_in_episode = 0;
        self.features()
    }

    /// One transition. Movement is deterministic; the trigger action leaves
    /// the position unchanged and, iff `noisy_tv`, resamples the distractor
    /// dims uniformly in [-1, 1]. Returns the new features and whether the
    /// episode just truncated at the horizon.
    pub fn step(&mut self, action: usize) -> Result<(DVector<f64>, bool)> {
        if action >= self.n_actions() {
            return Err(CigError::InvalidAction { action, count: self.n_actions() });
        }
        if action == self.trigger_action() {
            if self.config.noisy_tv {
                for d in &mut self.distractors {
                    *d = self.rng.gen_range(-1.0..1.0);
                }
            }
        } else {
            self.pos = self.apply_move(self.pos, action);
        }
        self.step_in_episode += 1;
        Ok((self.features(), self.step_in_episode >= self.horizon))
    }

    pub fn step_in_episode(&self) -> usize {
        self.step_in_episode
    }
}

/// Visited-cell bookkeeping for one run. `visited` only grows, and stays
/// bounded by the BFS count.
#[derive(Debug, Clone)]
pub struct CoverageRecord {
    visited: BTreeSet<usize>,
    total_reachable: usize,
    env_steps: usize,
}

impl CoverageRecord {
    pub fn new(total_reachable: usize) -> Result<CoverageRecord> {
        if total_reachable == 0 {
            return Err(CigError::EmptyInput("reachable cell set"));
        }
        Ok(CoverageRecord { visited: BTreeSet::new(), total_reachable, env_steps: 0 })
    }

    pub fn visit(&mut self, cell: usize) {
        self.visited.insert(cell);
        debug_assert!(
            self.visited.len() <= self.total_reachable,
            "visited {} cells but only {} are reachable",
            self.visited.len(),
            self.total_reachable
        );
    }

    pub fn note_step(&mut self) {
        self.env_steps += 1;
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    pub fn visited_count(&self) -> usize {
        self.visited.len()
    }

    pub fn coverage(&self) -> f64 {
        self.visited.len() as f64 / self.total_reachable as f64
    }
}

/// Shannon entropy (nats) of the normalized visit counts. Zero counts are
/// skipped; the total must be positive.
pub fn episode_entropy(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(CigError::EmptyInput("visit counts"));
    }
    let total = total as f64;
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / total;
            h -= p * p.ln();
        }
    }
    Ok(h)
}
