//! Ensemble-disagreement kernel.
//!
//! ## What this computes
//!
//! For `M` ensemble members predicting `T` next-states of dimension `d`, the
//! per-step deviations are each member's prediction minus the ensemble mean.
//! The step kernel is the `T x T` matrix
//!
//! ```text
//! K[j, t] = (1/M) * sum_k <delta_k(j), delta_k(t)>
//! ```
//!
//! i.e. the trace reduction of the `d x d` cross-step covariance blocks. Its
//! diagonal is the pooled per-step disagreement, its off-diagonal entries
//! capture cross-step redundancy. The full `Td x Td` covariance is never
//! materialized here; the compact `M x M` Gram of stacked deviations carries
//! the same spectrum and is what the ablation and verification paths consume.
//!
//! ## Verification
//!
//! Unit tests check centering against a compensated-summation oracle, the
//! kernel against a naive triple loop, positive semidefiniteness via the
//! eigenvalue route, and closed forms for degenerate shapes.

use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{CigError, Result};

/// Dense covariance materialization is only allowed up to this dimension.
pub const TD_MATERIALIZE_CAP: usize = 4096;

/// Per-member deviations from the ensemble-mean prediction.
///
/// Invariant: deviations sum to zero over members at every `(step, dim)`,
/// because they are residuals against the member mean.
#[derive(Debug, Clone)]
pub struct DeviationTensor {
    /// One `T x d` matrix per member.
    deltas: Vec<DMatrix<f64>>,
    m: usize,
    t: usize,
    d: usize,
}

impl DeviationTensor {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Deviation matrix (`T x d`) of one member.
    pub fn member(&self, k: usize) -> &DMatrix<f64> {
        &self.deltas[k]
    }

    /// Pooled squared disagreement of one step: `(1/M) sum_k |delta_k(t)|^2`.
    pub fn step_disagreement(&self, t: usize) -> f64 {
        let mut acc = 0.0;
        for dk in &self.deltas {
            for i in 0..self.d {
                let v = dk[(t, i)];
                acc += v * v;
            }
        }
        acc / self.m as f64
    }
}

/// Subtract the member mean from every prediction.
///
/// `member_predictions` holds one `T x d` matrix per member; all members must
/// share the same shape, there must be at least two members, and every entry
/// must be finite. `T = 0` is allowed and yields an empty tensor.
pub fn compute_deviations(member_predictions: &[DMatrix<f64>]) -> Result<DeviationTensor> {
    let m = member_predictions.len();
    if m < 2 {
        return Err(CigError::TooFewMembers(m));
    }
    let (t, d) = member_predictions[0].shape();
    for (k, p) in member_predictions.iter().enumerate() {
        if p.shape() != (t, d) {
            return Err(CigError::ShapeMismatch {
                expected: format!("{t}x{d}"),
                actual: format!("{}x{}", p.shape().0, p.shape().1),
            });
        }
        for row in 0..t {
            for col in 0..d {
                if !p[(row, col)].is_finite() {
                    return Err(CigError::NonFiniteInput { member: k, step: row });
                }
            }
        }
    }
    let mut mean = DMatrix::<f64>::zeros(t, d);
    for p in member_predictions {
        mean += p;
    }
    mean /= m as f64;
    let deltas = member_predictions.iter().map(|p| p - &mean).collect();
    Ok(DeviationTensor { deltas, m, t, d })
}

/// Step kernel with its ridge.
///
/// `k` is symmetric positive semidefinite; `ridge` is the aleatoric ridge
/// added to the diagonal when the trajectory score is factorized.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    k: DMatrix<f64>,
    ridge: f64,
}

impl KernelMatrix {
    pub fn t(&self) -> usize {
        self.k.nrows()
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn diag(&self, t: usize) -> f64 {
        self.k[(t, t)]
    }

    /// Ridged kernel `K + ridge * I` as a flat row-major buffer, ready for
    /// the Cholesky factorization.
    pub fn ridged_row_major(&self) -> Vec<f64> {
        let t = self.t();
        let mut out = vec![0.0; t * t];
        for i in 0..t {
            for j in 0..t {
                out[i * t + j] = self.k[(i, j)];
            }
            out[i * t + i] += self.ridge;
        }
        out
    }

    /// Construct directly from a symmetric matrix. Intended for tests and
    /// verification sweeps that need hand-built kernels.
    pub fn from_matrix(k: DMatrix<f64>, ridge: f64) -> Result<Self> {
        if k.nrows() != k.ncols() {
            return Err(CigError::ShapeMismatch {
                expected: "square".into(),
                actual: format!("{}x{}", k.nrows(), k.ncols()),
            });
        }
        if ridge < 0.0 {
            return Err(CigError::NegativeRidge(ridge));
        }
        Ok(KernelMatrix { k, ridge })
    }

    /// Debug dump: row-major CSV with 17 significant digits, one kernel row
    /// per line. Round-trips f64 exactly.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let t = self.t();
        for i in 0..t {
            let mut line = String::new();
            for j in 0..t {
                if j > 0 {
                    line.push(',');
                }
                line.push_str(&format!("{:.16e}", self.k[(i, j)]));
            }
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    }
}

/// Build the `T x T` step kernel from deviations.
///
/// The accumulation runs one member at a time (`K += Delta_k * Delta_k^T`)
/// and the result is symmetrized as `(K + K^T) / 2` so that equality of
/// mirrored entries is exact rather than approximate.
pub fn build_kernel(dev: &DeviationTensor, ridge: f64) -> Result<KernelMatrix> {
    if ridge < 0.0 {
        return Err(CigError::NegativeRidge(ridge));
    }
    let t = dev.t;
    let mut k = DMatrix::<f64>::zeros(t, t);
    for dk in &dev.deltas {
        k.gemm(1.0, dk, &dk.transpose(), 1.0);
    }
    k /= dev.m as f64;
    let sym = (&k + k.transpose()) * 0.5;
    Ok(KernelMatrix { k: sym, ridge })
}

/// Compact representation of the full `Td x Td` deviation covariance
/// `C = (1/M) * S * S^T`, where column `k` of `S` stacks member `k`'s
/// deviations step-major.
///
/// `gram` is the `M x M` matrix `S^T S / M`; it shares its nonzero spectrum
/// with `C` and sums to zero over each row because deviations are centered.
#[derive(Debug, Clone)]
pub struct FullCovariance {
    stacked: DMatrix<f64>,
    gram: DMatrix<f64>,
    sigma2: f64,
    t: usize,
    d: usize,
}

impl FullCovariance {
    pub fn td(&self) -> usize {
        self.t * self.d
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.gram.nrows()
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Stacked deviation columns (`Td x M`, unscaled).
    pub fn stacked(&self) -> &DMatrix<f64> {
        &self.stacked
    }

    /// Materialize the dense covariance `C = S S^T / M`. Guarded by
    /// [`TD_MATERIALIZE_CAP`]; this exists for the ablation reward and the
    /// verification suite, nothing on the planning path needs it.
    pub fn materialize(&self) -> Result<DMatrix<f64>> {
        let td = self.td();
        if td > TD_MATERIALIZE_CAP {
            return Err(CigError::MaterializationCap { td, cap: TD_MATERIALIZE_CAP });
        }
        Ok(&self.stacked * self.stacked.transpose() / self.m() as f64)
    }
}

/// Stack deviations per member and form the `M x M` Gram.
pub fn build_full_covariance_gram(dev: &DeviationTensor, sigma2: f64) -> Result<FullCovariance> {
    if sigma2 <= 0.0 || sigma2.is_nan() {
        return Err(CigError::NonPositiveSigma2(sigma2));
    }
    let (m, t, d) = (dev.m, dev.t, dev.d);
    let mut stacked = DMatrix::<f64>::zeros(t * d, m);
    for (k, dk) in dev.deltas.iter().enumerate() {
        for step in 0..t {
            for i in 0..d {
                stacked[(step * d + i, k)] = dk[(step, i)];
            }
        }
    }
    let gram = stacked.transpose() * &stacked / m as f64;
    Ok(FullCovariance { stacked, gram, sigma2, t, d })
}
