//! Experiment matrix execution.
//!
//! Fans configs out to run specs, executes the cells on a bounded worker
//! pool, writes one event stream and one summary table per cell, then joins
//! and writes one aggregate row per (method, environment) with IQM and
//! seeded 95% bootstrap intervals over seeds (resampling within each
//! method-environment stratum). A failed cell is recorded and skipped by the
//! aggregate; the rest of the matrix still runs and the files written for
//! successful cells remain valid.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{CigError, Result};
use crate::io::{write_aggregate, write_events, write_summary, AggregateRow};
use crate::planner::{run_exploration, RunOutput, RunSpec};
use crate::stats::iqm_ci;

pub const DEFAULT_BOOTSTRAP: usize = 2000;

/// What happened to each cell of the matrix.
#[derive(Debug)]
pub struct MatrixOutcome {
    pub completed: Vec<RunOutput>,
    /// (run id, error message) per failed cell.
    pub failures: Vec<(String, String)>,
    pub files: Vec<PathBuf>,
}

impl MatrixOutcome {
    pub fn all_succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Flatten configs into specs, rejecting run-id collisions across files.
pub fn collect_specs(configs: &[ExperimentConfig]) -> Result<Vec<RunSpec>> {
    let mut specs = Vec::new();
    for config in configs {
        specs.extend(config.to_run_specs()?);
    }
    let mut seen = HashSet::new();
    for spec in &specs {
        if !seen.insert(spec.run_id()) {
            return Err(CigError::Config(format!(
                "duplicate run id {} across configs",
                spec.run_id()
            )));
        }
    }
    Ok(specs)
}

fn write_run_files(out_dir: &Path, output: &RunOutput) -> Result<(PathBuf, PathBuf)> {
    let events_path = out_dir.join(format!("{}.events.jsonl", output.run_id));
    write_events(&events_path, &output.events)?;
    let summary_path = out_dir.join(format!("{}.summary.csv", output.run_id));
    write_summary(&summary_path, &output.summary)?;
    Ok((events_path, summary_path))
}

/// IQM-with-CI aggregate rows over the completed runs, ordered by
/// (method, env). The bootstrap reseeds per stratum in that order, so the
/// output is byte-stable no matter how the cells were scheduled.
pub fn aggregate_rows(
    completed: &[RunOutput],
    n_bootstrap: usize,
    bootstrap_seed: u64,
) -> Result<Vec<AggregateRow>> {
    let mut groups: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for run in completed {
        groups
            .entry((run.method.name().to_string(), run.env_label.clone()))
            .or_default()
            .push((run.final_coverage, run.final_mean_reward));
    }
    let mut rows = Vec::with_capacity(groups.len());
    for (stratum, ((method, env), values)) in groups.into_iter().enumerate() {
        let coverages: Vec<f64> = values.iter().map(|v| v.0).collect();
        let rewards: Vec<f64> = values.iter().map(|v| v.1).collect();
        let seed = bootstrap_seed.wrapping_add(stratum as u64);
        let (coverage_iqm, coverage_ci_lo, coverage_ci_hi) =
            iqm_ci(&coverages, n_bootstrap, seed)?;
        let (mean_reward_iqm, mean_reward_ci_lo, mean_reward_ci_hi) =
            iqm_ci(&rewards, n_bootstrap, seed.wrapping_add(0x9e37_79b9))?;
        rows.push(AggregateRow {
            method,
            env,
            runs: values.len(),
            coverage_iqm,
            coverage_ci_lo,
            coverage_ci_hi,
            mean_reward_iqm,
            mean_reward_ci_lo,
            mean_reward_ci_hi,
        });
    }
    Ok(rows)
}

/// Outcome of one matrix cell: run id plus either the run and its two
/// artifact paths or the error that stopped it.
type CellResult = (String, Result<(RunOutput, PathBuf, PathBuf)>);

/// Run the whole matrix with at most `workers` concurrent cells and write
/// all output files under `out_dir`.
pub fn run_matrix(
    configs: &[ExperimentConfig],
    out_dir: &Path,
    workers: usize,
    n_bootstrap: usize,
    bootstrap_seed: u64,
) -> Result<MatrixOutcome> {
    let specs = collect_specs(configs)?;
    fs::create_dir_all(out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CigError::Config(format!("worker pool: {e}")))?;
    let results: Vec<CellResult> = pool.install(|| {
        specs
            .par_iter()
            .map(|spec| {
                let id = spec.run_id();
                let cell = run_exploration(spec).and_then(|output| {
                    let (events, summary) = write_run_files(out_dir, &output)?;
                    Ok((output, events, summary))
                });
                (id, cell)
            })
            .collect()
    });

    let mut outcome =
        MatrixOutcome { completed: Vec::new(), failures: Vec::new(), files: Vec::new() };
    for (id, cell) in results {
        match cell {
            Ok((output, events, summary)) => {
                outcome.completed.push(output);
                outcome.files.push(events);
                outcome.files.push(summary);
            }
            Err(e) => outcome.failures.push((id, e.to_string())),
        }
    }

    let rows = aggregate_rows(&outcome.completed, n_bootstrap, bootstrap_seed)?;
    let aggregate_path = out_dir.join("aggregate.csv");
    write_aggregate(&aggregate_path, &rows)?;
    outcome.files.push(aggregate_path);
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_experiment;

    fn tiny_config(method_line: &str, extra: &str) -> ExperimentConfig {
        let text = format!(
            r#"
            {method_line}
            seeds = [0, 1]
            budget_steps = 60
            {extra}

            [env]
            kind = "open_room"
            size = 4

            [ensemble]
            m = 2
            width = 4
            lr = 0.05

            [planner]
            horizon = 2
            n_candidates = 2
            prefill = 30
            train_every = 10
            updates_per_train = 1
            batch_size = 8
            buffer_capacity = 256
            log_every = 30

            [baselines]
            rnd_width = 4
            rnd_out_dim = 2
            "#
        );
        parse_experiment(&text).unwrap()
    }

    #[test]
    fn single_cell_matrix_writes_exactly_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(r#"method = "cig""#, "");
        config.seeds = vec![0];
        let outcome = run_matrix(&[config], dir.path(), 1, 100, 7).unwrap();
        assert!(outcome.all_succeeded());
        assert_eq!(outcome.files.len(), 3);
        let mut names: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(
            names,
            vec![
                "aggregate.csv".to_string(),
                "cig_open_room4_s0.events.jsonl".to_string(),
                "cig_open_room4_s0.summary.csv".to_string(),
            ]
        );
    }

    #[test]
    fn rerun_is_byte_identical() {
        let config = tiny_config(r#"methods = ["cig", "p2e"]"#, "");
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = run_matrix(std::slice::from_ref(&config), dir_a.path(), 2, 200, 3).unwrap();
        let b = run_matrix(&[config], dir_b.path(), 1, 200, 3).unwrap();
        assert!(a.all_succeeded() && b.all_succeeded());
        for name in ["aggregate.csv", "cig_open_room4_s1.summary.csv", "p2e_open_room4_s0.events.jsonl"]
        {
            let bytes_a = fs::read(dir_a.path().join(name)).unwrap();
            let bytes_b = fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(bytes_a, bytes_b, "{name} differs across reruns/worker counts");
        }
    }

    #[test]
    fn aggregate_layout_is_methods_by_envs() {
        let config = tiny_config(r#"methods = ["cig", "p2e"]"#, "");
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_matrix(&[config], dir.path(), 1, 50, 1).unwrap();
        let rows = aggregate_rows(&outcome.completed, 50, 1).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].method, "cig");
        assert_eq!(rows[1].method, "p2e");
        assert!(rows.iter().all(|r| r.runs == 2));
        assert!(rows.iter().all(|r| r.coverage_ci_lo <= r.coverage_iqm));
        assert!(rows.iter().all(|r| r.coverage_iqm <= r.coverage_ci_hi));
    }

    #[test]
    fn degenerate_bootstrap_over_identical_values_is_zero_width() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(r#"method = "cig""#, "");
        // Zero-training prefill-only runs: coverage differs by seed, but a
        // duplicate of the same seed is impossible, so instead aggregate a
        // single run where the bootstrap always resamples the same value.
        config.seeds = vec![4];
        let outcome = run_matrix(&[config], dir.path(), 1, 100, 9).unwrap();
        let rows = aggregate_rows(&outcome.completed, 100, 9).unwrap();
        assert_eq!(rows[0].coverage_ci_lo, rows[0].coverage_iqm);
        assert_eq!(rows[0].coverage_ci_hi, rows[0].coverage_iqm);
    }

    #[test]
    fn failed_cells_are_recorded_while_the_matrix_continues() {
        let good = tiny_config(r#"method = "cig""#, "");
        let mut bad = tiny_config(r#"method = "p2e""#, "");
        // Large enough that the squared residual overflows to infinity on
        // the training step after the first update, tripping the non-finite
        // loss guard.
        bad.ensemble.lr = 1e200;
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_matrix(&[good, bad], dir.path(), 1, 50, 2).unwrap();
        assert_eq!(outcome.completed.len(), 2);
        assert_eq!(outcome.failures.len(), 2);
        assert!(outcome.failures.iter().all(|(id, _)| id.starts_with("p2e_")));
        let rows = aggregate_rows(&outcome.completed, 50, 2).unwrap();
        assert_eq!(rows.len(), 1, "failed cells must not reach the aggregate");
        assert!(dir.path().join("cig_open_room4_s0.summary.csv").exists());
        assert!(!dir.path().join("p2e_open_room4_s0.summary.csv").exists());
    }

    #[test]
    fn cross_config_run_id_collisions_are_rejected() {
        let a = tiny_config(r#"method = "cig""#, "");
        let b = tiny_config(r#"method = "cig""#, "");
        match collect_specs(&[a, b]) {
            Err(CigError::Config(msg)) => assert!(msg.contains("duplicate run id")),
            other => panic!("expected collision error, got {other:?}"),
        }
    }
}
