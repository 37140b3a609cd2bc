//! Serialization of run artifacts.
//!
//! Each run writes two files, and every invocation adds one aggregate:
//!
//! * `<run_id>.events.jsonl`: one JSON object per line, tagged by `event`
//!   (`log`, `episode`, `milestone`).
//! * `<run_id>.summary.csv`: the pinned flat schema, one row per log cadence.
//! * `aggregate.csv`: one row per (method, env) with interquartile means and
//!   bootstrap confidence intervals over seeds.
//!
//! Floats are written with Rust's shortest-round-trip `Display` formatting,
//! so identical values serialize to identical bytes; the determinism
//! acceptance check compares summary files byte-for-byte.
//!
//! The `reward` subcommand reads rollouts as JSON lines of
//! `{"member_predictions": [[[..]]], "sigma2": ..}` (member-major, then
//! steps, then feature dims).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CigError, Result};

/// One line of the `.events.jsonl` stream.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    /// Periodic snapshot at the logging cadence.
    Log {
        step: usize,
        coverage: f64,
        mean_reward: f64,
        sigma2: f64,
        mean_lifelong: f64,
        mean_prefix_explained: f64,
        return_std: f64,
    },
    /// Emitted when an episode truncates at the horizon.
    Episode { episode: usize, env_steps: usize, entropy: f64 },
    /// First time a run-level landmark is hit (e.g. the terminal room).
    Milestone { name: String, step: usize },
}

/// Pinned summary schema: one row per log cadence.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SummaryRow {
    pub run_id: String,
    pub method: String,
    pub env: String,
    pub seed: u64,
    pub env_steps: usize,
    pub coverage: f64,
    pub mean_reward: f64,
    pub sigma2: f64,
    pub mean_lifelong: f64,
    pub mean_prefix_explained: f64,
    pub episode_entropy: f64,
}

pub const SUMMARY_HEADER: &str = "run_id,method,env,seed,env_steps,coverage,mean_reward,\
                                  sigma2,mean_lifelong,mean_prefix_explained,episode_entropy";

/// One aggregate row per (method, env), IQM and 95% bootstrap CI over seeds.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AggregateRow {
    pub method: String,
    pub env: String,
    pub runs: usize,
    pub coverage_iqm: f64,
    pub coverage_ci_lo: f64,
    pub coverage_ci_hi: f64,
    pub mean_reward_iqm: f64,
    pub mean_reward_ci_lo: f64,
    pub mean_reward_ci_hi: f64,
}

pub const AGGREGATE_HEADER: &str = "method,env,runs,coverage_iqm,coverage_ci_lo,coverage_ci_hi,\
                                    mean_reward_iqm,mean_reward_ci_lo,mean_reward_ci_hi";

pub fn write_events<P: AsRef<Path>>(path: P, events: &[Event]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for event in events {
        serde_json::to_writer(&mut w, event)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary<P: AsRef<Path>>(path: P, rows: &[SummaryRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{SUMMARY_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.run_id,
            r.method,
            r.env,
            r.seed,
            r.env_steps,
            r.coverage,
            r.mean_reward,
            r.sigma2,
            r.mean_lifelong,
            r.mean_prefix_explained,
            r.episode_entropy
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregate<P: AsRef<Path>>(path: P, rows: &[AggregateRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{AGGREGATE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.method,
            r.env,
            r.runs,
            r.coverage_iqm,
            r.coverage_ci_lo,
            r.coverage_ci_hi,
            r.mean_reward_iqm,
            r.mean_reward_ci_lo,
            r.mean_reward_ci_hi
        )?;
    }
    w.flush()?;
    Ok(())
}

/// One diagnostic rollout: per-member predicted trajectories plus the noise
/// scale to use as the ridge base.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutRecord {
    /// Member-major: `member_predictions[k][t][i]` is member k's prediction
    /// of feature i at rollout step t.
    pub member_predictions: Vec<Vec<Vec<f64>>>,
    pub sigma2: f64,
}

impl RolloutRecord {
    /// Convert to one T x d matrix per member, validating rectangularity.
    pub fn to_matrices(&self, line: usize) -> Result<Vec<DMatrix<f64>>> {
        if self.member_predictions.is_empty() {
            return Err(CigError::MalformedInput {
                line,
                message: "member_predictions is empty".to_string(),
            });
        }
        let t = self.member_predictions[0].len();
        let d = self.member_predictions[0].first().map_or(0, Vec::len);
        let mut out = Vec::with_capacity(self.member_predictions.len());
        for (k, member) in self.member_predictions.iter().enumerate() {
            if member.len() != t {
                return Err(CigError::MalformedInput {
                    line,
                    message: format!("member {k} has {} steps, expected {t}", member.len()),
                });
            }
            let mut m = DMatrix::zeros(t, d);
            for (step, row) in member.iter().enumerate() {
                if row.len() != d {
                    return Err(CigError::MalformedInput {
                        line,
                        message: format!(
                            "member {k} step {step} has {} dims, expected {d}",
                            row.len()
                        ),
                    });
                }
                for (i, v) in row.iter().enumerate() {
                    m[(step, i)] = *v;
                }
            }
            out.push(m);
        }
        Ok(out)
    }
}

/// Parse a rollout JSONL file; errors carry 1-based line numbers.
pub fn read_rollout_jsonl<P: AsRef<Path>>(path: P) -> Result<Vec<RolloutRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RolloutRecord =
            serde_json::from_str(&line).map_err(|e| CigError::MalformedInput {
                line: idx + 1,
                message: e.to_string(),
            })?;
        records.push(record);
    }
    Ok(records)
}
