//! Dynamics ensemble: M identically shaped networks differing only in their
//! init seeds, trained on identical batches with SGD plus momentum.
//!
//! Members map `(state, action)` to the predicted next state over the raw
//! feature vector (identity encoder). Disagreement between members is the
//! epistemic signal the kernel consumes; it shrinks where data accumulates
//! and persists off-distribution. Checkpoints are a single file: one JSON
//! header line, then member parameters as little-endian 64-bit reals.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CigError, Result};
use crate::mlp::Mlp;

/// SGD momentum coefficient for every member.
pub const MOMENTUM: f64 = 0.9;

/// Real transitions for training.
#[derive(Debug, Clone, Default)]
pub struct TransitionBatch {
    pub states: Vec<DVector<f64>>,
    pub actions: Vec<DVector<f64>>,
    pub next_states: Vec<DVector<f64>>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// The member ensemble plus per-member optimizer state.
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    members: Vec<Mlp>,
    velocities: Vec<Vec<f64>>,
    seeds: Vec<u64>,
    step_count: u64,
    state_dim: usize,
    action_dim: usize,
    width: usize,
}

impl EnsembleModel {
    /// Build `m` members with seeds drawn from one stream over `base_seed`,
    /// so the whole ensemble is a deterministic function of that seed.
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        width: usize,
        m: usize,
        base_seed: u64,
    ) -> Result<Self> {
        if m < 2 {
            return Err(CigError::TooFewMembers(m));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
        let seeds: Vec<u64> = (0..m).map(|_| rng.gen()).collect();
        let members: Vec<Mlp> = seeds
            .iter()
            .map(|&s| Mlp::new(state_dim + action_dim, width, state_dim, s))
            .collect();
        let velocities = members.iter().map(|mlp| vec![0.0; mlp.n_params()]).collect();
        Ok(EnsembleModel { members, velocities, seeds, step_count: 0, state_dim, action_dim, width })
    }

    pub fn m(&self) -> usize {
        self.members.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn seeds(&self) -> &[u64] {
        self.seeds.as_slice()
    }

    pub fn member(&self, k: usize) -> &Mlp {
        &self.members[k]
    }

    /// Direct parameter access, for crafting degenerate models in tests and
    /// oracle constructions. Velocities are left untouched.
    pub fn member_mut(&mut self, k: usize) -> &mut Mlp {
        &mut self.members[k]
    }

    fn check_pair(&self, state: &DVector<f64>, action: &DVector<f64>) -> Result<()> {
        if state.len() != self.state_dim || action.len() != self.action_dim {
            return Err(CigError::ShapeMismatch {
                expected: format!("state {} action {}", self.state_dim, self.action_dim),
                actual: format!("state {} action {}", state.len(), action.len()),
            });
        }
        Ok(())
    }

    /// One member's next-state prediction.
    pub fn predict_member(
        &self,
        k: usize,
        state: &DVector<f64>,
        action: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_pair(state, action)?;
        let mut x = DVector::zeros(self.state_dim + self.action_dim);
        x.rows_mut(0, self.state_dim).copy_from(state);
        x.rows_mut(self.state_dim, self.action_dim).copy_from(action);
        Ok(self.members[k].forward(&x))
    }

    /// All members' predictions over a `T`-step sequence of pairs; returns
    /// one `T x state_dim` matrix per member.
    pub fn predict_all(
        &self,
        states: &[DVector<f64>],
        actions: &[DVector<f64>],
    ) -> Result<Vec<DMatrix<f64>>> {
        if states.len() != actions.len() {
            return Err(CigError::ShapeMismatch {
                expected: format!("{} actions", states.len()),
                actual: format!("{} actions", actions.len()),
            });
        }
        let t = states.len();
        let mut out = vec![DMatrix::zeros(t, self.state_dim); self.m()];
        for step in 0..t {
            self.check_pair(&states[step], &actions[step])?;
            let mut x = DVector::zeros(self.state_dim + self.action_dim);
            x.rows_mut(0, self.state_dim).copy_from(&states[step]);
            x.rows_mut(self.state_dim, self.action_dim).copy_from(&actions[step]);
            for (k, member) in self.members.iter().enumerate() {
                let y = member.forward(&x);
                for i in 0..self.state_dim {
                    out[k][(step, i)] = y[i];
                }
            }
        }
        Ok(out)
    }

    /// One full-batch gradient step per member on the shared batch. Returns
    /// per-member losses. A non-finite loss aborts before any parameter of
    /// that member is touched; `lr = 0` leaves parameters bit-identical.
    pub fn train_step(&mut self, batch: &TransitionBatch, lr: f64) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(CigError::EmptyBatch);
        }
        let xs: Vec<DVector<f64>> = batch
            .states
            .iter()
            .zip(&batch.actions)
            .map(|(s, a)| {
                let mut x = DVector::zeros(self.state_dim + self.action_dim);
                x.rows_mut(0, self.state_dim).copy_from(s);
                x.rows_mut(self.state_dim, self.action_dim).copy_from(a);
                x
            })
            .collect();
        let mut losses = Vec::with_capacity(self.m());
        for (k, member) in self.members.iter_mut().enumerate() {
            let (loss, grads) = member.loss_and_grad(&xs, &batch.next_states);
            if !loss.is_finite() {
                return Err(CigError::NonFiniteLoss { member: k });
            }
            let g = grads.flat();
            let v = &mut self.velocities[k];
            for (vi, gi) in v.iter_mut().zip(&g) {
                *vi = MOMENTUM * *vi + gi;
            }
            if lr != 0.0 {
                let mut params = member.flat_params();
                for (p, vi) in params.iter_mut().zip(v.iter()) {
                    *p -= lr * *vi;
                }
                member.set_flat_params(&params);
            }
            losses.push(loss);
        }
        self.step_count += 1;
        Ok(losses)
    }

    /// Per-transition residuals of the ensemble-mean prediction,
    /// `|s' - mean_k mu_k(s, a)|^2 / d`, the aleatoric estimator's input.
    pub fn mean_residuals(&self, batch: &TransitionBatch) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let mut mean = DVector::zeros(self.state_dim);
            for k in 0..self.m() {
                mean += self.predict_member(k, &batch.states[i], &batch.actions[i])?;
            }
            mean /= self.m() as f64;
            out.push((&batch.next_states[i] - mean).norm_squared() / self.state_dim as f64);
        }
        Ok(out)
    }

    /// Write the checkpoint: one JSON header line, then all member
    /// parameters as little-endian f64 in member order.
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let header = CheckpointHeader {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            width: self.width,
            m: self.m(),
            seeds: self.seeds.clone(),
            step_count: self.step_count,
            params_per_member: self.members[0].n_params(),
        };
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for member in &self.members {
            for p in member.flat_params() {
                w.write_all(&p.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Read a checkpoint written by [`EnsembleModel::save`]. Dimension or
    /// length mismatches are reported as corruption, not silently padded.
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut header_line = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            let n = r.read(&mut byte)?;
            if n == 0 {
                return Err(CigError::CorruptCheckpoint("missing header line".into()));
            }
            if byte[0] == b'\n' {
                break;
            }
            header_line.push(byte[0]);
        }
        let header: CheckpointHeader = serde_json::from_slice(&header_line)
            .map_err(|e| CigError::CorruptCheckpoint(format!("bad header: {e}")))?;
        if header.m < 2 || header.seeds.len() != header.m {
            return Err(CigError::CorruptCheckpoint("inconsistent member count".into()));
        }
        let mut model = EnsembleModel::new(
            header.state_dim,
            header.action_dim,
            header.width,
            header.m,
            0,
        )?;
        model.seeds = header.seeds;
        model.step_count = header.step_count;
        let expected = model.members[0].n_params();
        if header.params_per_member != expected {
            return Err(CigError::CorruptCheckpoint(format!(
                "expected {expected} params per member, header says {}",
                header.params_per_member
            )));
        }
        let mut blob = Vec::new();
        r.read_to_end(&mut blob)?;
        if blob.len() != header.m * expected * 8 {
            return Err(CigError::CorruptCheckpoint(format!(
                "parameter blob has {} bytes, expected {}",
                blob.len(),
                header.m * expected * 8
            )));
        }
        for (k, member) in model.members.iter_mut().enumerate() {
            let mut flat = vec![0.0f64; expected];
            for (i, p) in flat.iter_mut().enumerate() {
                let off = (k * expected + i) * 8;
                *p = f64::from_le_bytes(blob[off..off + 8].try_into().unwrap());
            }
            member.set_flat_params(&flat);
        }
        for v in &mut model.velocities {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    state_dim: usize,
    action_dim: usize,
    width: usize,
    m: usize,
    seeds: Vec<u64>,
    step_count: u64,
    params_per_member: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{build_kernel, compute_deviations};
    use rand::Rng;

    fn linear_teacher_batch(
        n: usize,
        a: &DMatrix<f64>,
        noise: f64,
        rng: &mut ChaCha8Rng,
    ) -> TransitionBatch {
        let d = a.nrows();
        let mut batch = TransitionBatch::default();
        for _ in 0..n {
            let s = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
            let mut next = a * &s;
            if noise > 0.0 {
                for i in 0..d {
                    // Box-Muller keeps the dev-dependency surface small here.
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    next[i] += noise * (-2.0 * u1.ln()).sqrt() * u2.cos();
                }
            }
            batch.states.push(s);
            batch.actions.push(DVector::zeros(1));
            batch.next_states.push(next);
        }
        batch
    }

    #[test]
    fn members_differ_only_by_seed_and_are_reproducible() {
        let a = EnsembleModel::new(4, 2, 8, 3, 77).unwrap();
        let b = EnsembleModel::new(4, 2, 8, 3, 77).unwrap();
        for k in 0..3 {
            assert_eq!(a.member(k).flat_params(), b.member(k).flat_params());
        }
        assert_ne!(a.member(0).flat_params(), a.member(1).flat_params());
    }

    #[test]
    fn rejects_degenerate_ensembles_and_bad_shapes() {
        assert!(matches!(EnsembleModel::new(4, 2, 8, 1, 0), Err(CigError::TooFewMembers(1))));
        let model = EnsembleModel::new(4, 2, 8, 3, 0).unwrap();
        let bad = model.predict_member(0, &DVector::zeros(3), &DVector::zeros(2));
        assert!(matches!(bad, Err(CigError::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DMatrix::from_fn(3, 3, |i, j| if i == j { 0.9 } else { 0.05 });
        let batch = linear_teacher_batch(16, &a, 0.0, &mut rng);
        let mut model = EnsembleModel::new(3, 1, 8, 2, 1).unwrap();
        let before: Vec<Vec<f64>> = (0..2).map(|k| model.member(k).flat_params()).collect();
        model.train_step(&batch, 0.0).unwrap();
        for (k, frozen) in before.iter().enumerate() {
            let after = model.member(k).flat_params();
            assert!(frozen.iter().zip(&after).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(model.step_count(), 1);
    }

    #[test]
    fn non_finite_loss_is_reported_with_member_index() {
        let mut model = EnsembleModel::new(2, 1, 4, 2, 3).unwrap();
        let batch = TransitionBatch {
            states: vec![DVector::from_vec(vec![1e308, 1e308])],
            actions: vec![DVector::zeros(1)],
            next_states: vec![DVector::from_vec(vec![f64::MAX, -f64::MAX])],
        };
        match model.train_step(&batch, 1e-3) {
            Err(CigError::NonFiniteLoss { member }) => assert_eq!(member, 0),
            other => panic!("expected non-finite loss, got {other:?}"),
        }
    }

    #[test]
    fn fixed_batch_loss_trends_down() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = DMatrix::from_fn(3, 3, |i, j| if i == j { 0.8 } else { -0.1 });
        let batch = linear_teacher_batch(32, &a, 0.0, &mut rng);
        let mut model = EnsembleModel::new(3, 1, 16, 3, 2).unwrap();
        let mut losses = Vec::new();
        for _ in 0..300 {
            losses.push(model.train_step(&batch, 0.05).unwrap()[0]);
        }
        // Momentum wiggles individual steps; compare 50-step window means.
        let early: f64 = losses[0..50].iter().sum::<f64>() / 50.0;
        let late: f64 = losses[250..300].iter().sum::<f64>() / 50.0;
        assert!(late < early * 0.5, "no training progress: {early} -> {late}");
    }

    #[test]
    fn linear_teacher_is_fit_well_by_every_member() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = DMatrix::from_fn(3, 3, |i, j| if i == j { 0.4 } else { 0.05 });
        let mut model = EnsembleModel::new(3, 1, 32, 3, 4).unwrap();
        for step in 0..6000 {
            let batch = linear_teacher_batch(48, &a, 0.0, &mut rng);
            let lr = if step < 4000 { 0.1 } else { 0.02 };
            model.train_step(&batch, lr).unwrap();
        }
        let held_out = linear_teacher_batch(64, &a, 0.0, &mut rng);
        for k in 0..3 {
            let mut se = 0.0;
            for i in 0..held_out.len() {
                let pred =
                    model.predict_member(k, &held_out.states[i], &held_out.actions[i]).unwrap();
                se += (&held_out.next_states[i] - pred).norm_squared();
            }
            let rmse = (se / (held_out.len() * 3) as f64).sqrt();
            assert!(rmse < 1e-2, "member {k} rmse {rmse}");
        }
    }

    #[test]
    fn disagreement_shrinks_with_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = DMatrix::from_fn(3, 3, |i, j| if i == j { 0.6 } else { 0.1 });
        let mut model = EnsembleModel::new(3, 1, 24, 4, 5).unwrap();
        let probe = linear_teacher_batch(12, &a, 0.0, &mut rng);
        let mean_ktt = |model: &EnsembleModel| {
            let preds = model.predict_all(&probe.states, &probe.actions).unwrap();
            let dev = compute_deviations(&preds).unwrap();
            let kern = build_kernel(&dev, 0.0).unwrap();
            (0..probe.len()).map(|t| kern.diag(t)).sum::<f64>() / probe.len() as f64
        };
        let before = mean_ktt(&model);
        for _ in 0..1500 {
            let batch = linear_teacher_batch(48, &a, 0.0, &mut rng);
            model.train_step(&batch, 0.08).unwrap();
        }
        let after = mean_ktt(&model);
        assert!(
            after * 10.0 <= before,
            "disagreement did not shrink 10x: {before} -> {after}"
        );
    }

    #[test]
    fn irreducible_noise_bounds_trained_disagreement() {
        // On pure-noise targets the members converge to the same conditional
        // mean, so pooled disagreement falls below the aleatoric level
        // sigma2 * d estimated from the mean residuals.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let zero = DMatrix::<f64>::zeros(2, 2);
        let mut model = EnsembleModel::new(2, 1, 16, 4, 11).unwrap();
        let mut est = crate::aleatoric::AleatoricEstimate::new(0.99);
        for _ in 0..2000 {
            let batch = linear_teacher_batch(32, &zero, 0.5, &mut rng);
            model.train_step(&batch, 0.05).unwrap();
            est.update(&model.mean_residuals(&batch).unwrap()).unwrap();
        }
        let probe = linear_teacher_batch(32, &zero, 0.5, &mut rng);
        let preds = model.predict_all(&probe.states, &probe.actions).unwrap();
        let kern = build_kernel(&compute_deviations(&preds).unwrap(), 0.0).unwrap();
        let mean_ktt = (0..probe.len()).map(|t| kern.diag(t)).sum::<f64>() / probe.len() as f64;
        let aleatoric_level = est.ridge_value(2, 1.0);
        assert!(
            mean_ktt < aleatoric_level,
            "disagreement {mean_ktt} should sit below the noise level {aleatoric_level}"
        );
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = DMatrix::from_fn(3, 3, |i, j| if i == j { 0.5 } else { 0.2 });
        let mut model = EnsembleModel::new(3, 1, 8, 3, 6).unwrap();
        for _ in 0..20 {
            let batch = linear_teacher_batch(16, &a, 0.1, &mut rng);
            model.train_step(&batch, 0.05).unwrap();
        }
        model.save(&path).unwrap();
        let loaded = EnsembleModel::load(&path).unwrap();
        assert_eq!(loaded.m(), 3);
        assert_eq!(loaded.step_count(), 20);
        assert_eq!(loaded.seeds(), model.seeds());
        for k in 0..3 {
            let a = model.member(k).flat_params();
            let b = loaded.member(k).flat_params();
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = EnsembleModel::new(3, 1, 8, 3, 6).unwrap();
        model.save(&path).unwrap();
        // Truncate the blob.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(EnsembleModel::load(&path), Err(CigError::CorruptCheckpoint(_))));
        // Garbage header.
        std::fs::write(&path, b"not json\n").unwrap();
        assert!(matches!(EnsembleModel::load(&path), Err(CigError::CorruptCheckpoint(_))));
    }
}
