//! Rank and aggregation statistics for the harness.
//!
//! The interquartile mean uses the fractional-trim convention: sort the
//! values, give each order statistic the probability interval it occupies,
//! and average with weights equal to each interval's overlap with the middle
//! [1/4, 3/4] band. Confidence intervals come from a seeded percentile
//! bootstrap over seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CigError, Result};

/// Average ranks (1-based) with ties sharing their mean rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-tie ranks.
///
/// Returns `None` for inputs shorter than two. Two constant inputs have
/// identical rankings and correlate at 1; a single constant side yields 0.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 && syy == 0.0 {
        return Some(1.0);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Some(0.0);
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Interquartile mean under the fractional-trim convention.
pub fn iqm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(CigError::EmptyInput("iqm needs at least one value"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len() as f64;
    let mut weighted = 0.0;
    let mut weight = 0.0;
    for (i, v) in sorted.iter().enumerate() {
        let lo = (i as f64 / n).max(0.25);
        let hi = ((i as f64 + 1.0) / n).min(0.75);
        if hi > lo {
            weighted += (hi - lo) * v;
            weight += hi - lo;
        }
    }
    Ok(weighted / weight)
}

/// IQM with a percentile bootstrap confidence interval.
///
/// Resamples the per-seed values with replacement `n_bootstrap` times using
/// the given seed and returns `(iqm, lo, hi)` at the 2.5 / 97.5 percentiles.
/// Identical inputs collapse to a zero-width interval.
pub fn iqm_ci(values: &[f64], n_bootstrap: usize, seed: u64) -> Result<(f64, f64, f64)> {
    let point = iqm(values)?;
    if n_bootstrap == 0 {
        return Ok((point, point, point));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(n_bootstrap);
    let mut resample = vec![0.0; values.len()];
    for _ in 0..n_bootstrap {
        for slot in resample.iter_mut() {
            *slot = values[rng.gen_range(0..values.len())];
        }
        stats.push(iqm(&resample)?);
    }
    stats.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    Ok((point, percentile(&stats, 0.025), percentile(&stats, 0.975)))
}

/// Empirical percentile with linear interpolation between order statistics.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Online mean/variance accumulator (Welford). Used for the logged
/// return-scale statistic.
#[derive(Debug, Clone, Default)]
pub struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population standard deviation; 0 before two samples.
    pub fn std(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / self.n as f64).sqrt()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn iqm_trims_the_outlier() {
        // n = 5: the middle band covers order statistics 2..4 with weights
        // 0.3, 0.4, 0.3, so the outlier at 100 contributes nothing.
        let v = [1.0, 2.0, 3.0, 4.0, 100.0];
        assert_relative_eq!(iqm(&v).unwrap(), 3.0, epsilon = 1e-12);
        // Order must not matter.
        let shuffled = [100.0, 3.0, 1.0, 4.0, 2.0];
        assert_relative_eq!(iqm(&shuffled).unwrap(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn iqm_fractional_weights_hand_computed() {
        // n = 6: boundary statistics carry 1/12, interior ones 1/6:
        // iqm = (2*1 + 3*2 + 4*2 + 5*1) / (12 * 0.5) = 3.5.
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 100.0];
        assert_relative_eq!(iqm(&v).unwrap(), 3.5, epsilon = 1e-12);
        // n = 3 separates fractional trimming from integer trimming: weights
        // are (1/12, 4/12, 1/12), so iqm = (1 + 4*2 + 10) / 6, not the
        // untrimmed mean 13/3.
        let w = [1.0, 2.0, 10.0];
        assert_relative_eq!(iqm(&w).unwrap(), 19.0 / 6.0, epsilon = 1e-12);
        // Sorted (0,0,0,0,10) leaves the middle band entirely on zeros.
        let z = [0.0, 0.0, 10.0, 0.0, 0.0];
        assert_relative_eq!(iqm(&z).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn iqm_single_value_and_mean_of_uniform_block() {
        assert_relative_eq!(iqm(&[7.0]).unwrap(), 7.0, epsilon = 1e-12);
        // n = 8: clean quartiles, flat mean of the middle four.
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        assert_relative_eq!(iqm(&v).unwrap(), 4.5, epsilon = 1e-12);
    }

    #[test]
    fn iqm_ci_degenerate_inputs_collapse() {
        let (point, lo, hi) = iqm_ci(&[2.0, 2.0, 2.0, 2.0], 500, 9).unwrap();
        assert_eq!((point, lo, hi), (2.0, 2.0, 2.0));
    }

    #[test]
    fn iqm_ci_is_seed_deterministic_and_ordered() {
        let v = [0.1, 0.4, 0.35, 0.8, 0.55];
        let a = iqm_ci(&v, 2000, 123).unwrap();
        let b = iqm_ci(&v, 2000, 123).unwrap();
        assert_eq!(a, b);
        assert!(a.1 <= a.0 && a.0 <= a.2);
        let c = iqm_ci(&v, 2000, 124).unwrap();
        assert_eq!(a.0, c.0);
    }

    #[test]
    fn spearman_monotone_and_reversed() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [10.0, 20.0, 30.0, 40.0];
        assert_relative_eq!(spearman(&x, &y).unwrap(), 1.0);
        let z = [4.0, 3.0, 2.0, 1.0];
        assert_relative_eq!(spearman(&x, &z).unwrap(), -1.0);
    }

    #[test]
    fn spearman_handles_ties_and_degenerate_inputs() {
        let x = [1.0, 1.0, 2.0];
        let y = [5.0, 5.0, 9.0];
        assert_relative_eq!(spearman(&x, &y).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0], &[2.0]), None);
        assert_eq!(spearman(&[1.0, 1.0], &[3.0, 3.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[3.0, 4.0]), Some(0.0));
    }

    #[test]
    fn welford_matches_two_pass() {
        let xs = [1.0, 4.0, 2.0, 8.0, 5.0];
        let mut w = Welford::default();
        for x in xs {
            w.push(x);
        }
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert_relative_eq!(w.mean(), mean, epsilon = 1e-12);
        assert_relative_eq!(w.std(), var.sqrt(), epsilon = 1e-12);
    }
}
