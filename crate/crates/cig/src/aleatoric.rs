//! Aleatoric noise estimation and the ridge it induces.
//!
//! The estimator tracks the per-dimension mean squared residual of the
//! ensemble-mean prediction against observed next states,
//! `sigma2 = (1/(N*d)) * sum |s' - mean_prediction|^2`, smoothed over
//! training batches by an exponential moving average. Because residuals mix
//! irreducible noise with leftover model error, the estimate upper-bounds the
//! true noise floor, which errs on the side of discounting rewards. The
//! trajectory scorer adds `multiplier * sigma2 * d` to the kernel diagonal.

use serde::{Deserialize, Serialize};

use crate::error::{CigError, Result};

/// Floor substituted for an exactly zero estimate so the ridge never
/// vanishes entirely.
pub const SIGMA2_FLOOR: f64 = 1e-6;

/// EMA state of the per-dimension aleatoric variance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AleatoricEstimate {
    pub sigma2: f64,
    pub beta: f64,
    pub initialized: bool,
}

impl AleatoricEstimate {
    /// `beta` is the EMA momentum (0.99 default in the harness).
    pub fn new(beta: f64) -> Self {
        AleatoricEstimate { sigma2: 0.0, beta, initialized: false }
    }

    /// Fold one training batch of per-transition residuals (each already
    /// `|s' - mean_prediction|^2 / d`). The first update adopts the batch
    /// mean directly; later updates blend with momentum `beta`. Empty
    /// batches and negative residuals are rejected.
    pub fn update(&mut self, residuals: &[f64]) -> Result<()> {
        if residuals.is_empty() {
            return Err(CigError::EmptyBatch);
        }
        for (i, r) in residuals.iter().enumerate() {
            if *r < 0.0 || r.is_nan() {
                return Err(CigError::NegativeResidual { index: i, value: *r });
            }
        }
        let batch_mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
        if self.initialized {
            self.sigma2 = self.beta * self.sigma2 + (1.0 - self.beta) * batch_mean;
        } else {
            self.sigma2 = batch_mean;
            self.initialized = true;
        }
        Ok(())
    }

    /// Ridge added to the kernel diagonal: `multiplier * sigma2 * d`, with
    /// the floor substituted when the estimate is exactly zero (untrained or
    /// perfectly fit). The floor only enters here, never the stored state.
    pub fn ridge_value(&self, d: usize, multiplier: f64) -> f64 {
        let s = if self.sigma2 > 0.0 { self.sigma2 } else { SIGMA2_FLOOR };
        multiplier * s * d as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_update_takes_batch_value() {
        let mut est = AleatoricEstimate::new(0.99);
        est.update(&[1.0]).unwrap();
        assert_eq!(est.sigma2, 1.0);
        est.update(&[0.0]).unwrap();
        assert_relative_eq!(est.sigma2, 0.99, epsilon = 1e-15);
    }

    #[test]
    fn ridge_scales_with_dimension_and_floors_at_zero() {
        let mut est = AleatoricEstimate::new(0.99);
        est.update(&[0.5]).unwrap();
        assert_relative_eq!(est.ridge_value(8, 1.0), 4.0, epsilon = 1e-15);
        let zero = AleatoricEstimate::new(0.99);
        assert_relative_eq!(zero.ridge_value(8, 1.0), 8e-6, epsilon = 1e-18);
        // A trained-but-perfect fit floors the same way.
        let mut perfect = AleatoricEstimate::new(0.99);
        perfect.update(&[0.0, 0.0]).unwrap();
        assert_relative_eq!(perfect.ridge_value(4, 2.0), 8e-6, epsilon = 1e-18);
    }

    #[test]
    fn rejects_empty_and_negative_batches() {
        let mut est = AleatoricEstimate::new(0.99);
        assert!(matches!(est.update(&[]), Err(CigError::EmptyBatch)));
        match est.update(&[0.1, -0.2]) {
            Err(CigError::NegativeResidual { index, value }) => {
                assert_eq!(index, 1);
                assert_eq!(value, -0.2);
            }
            other => panic!("expected negative-residual rejection, got {other:?}"),
        }
        // Failed updates must not initialize the state.
        assert!(!est.initialized);
    }

    #[test]
    fn converges_to_noise_variance_on_stationary_batches() {
        // Residual stream around v = 0.25: the EMA settles near v.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut est = AleatoricEstimate::new(0.9);
        for _ in 0..2000 {
            let batch: Vec<f64> = (0..16).map(|_| 0.25 * rng.gen_range(0.5..1.5)).collect();
            est.update(&batch).unwrap();
        }
        assert!((est.sigma2 - 0.25).abs() < 0.05, "sigma2 = {}", est.sigma2);
    }
}
