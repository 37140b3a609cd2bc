//! Independent verification suite for the mathematical identities the
//! reward pipeline relies on.
//!
//! Every check recomputes its target quantity through a route disjoint from
//! the production code path: dense eigenvalue log-determinants instead of
//! incremental Cholesky pivots, materialized covariances instead of Gram
//! factorizations, Monte-Carlo entropy instead of closed forms, and hand
//! constructions with known answers. A report passes iff its worst instance
//! error is within the stated tolerance; exact linear-algebra identities are
//! held to 1e-9 (the diagonal link to scaled disagreement to 1e-12) and
//! statistical checks to three standard errors.
//!
//! Checks are independent and own their seeded generators, so the suite runs
//! them concurrently without affecting results.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::kernel::{build_full_covariance_gram, build_kernel, compute_deviations, KernelMatrix};
use crate::linalg::{logdet_eigen, numerical_rank, sym_eigenvalues};
use crate::reward::{cig_rewards, no_prefix_rewards};

/// Outcome of one verification check.
#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub check_name: String,
    pub instances: usize,
    pub max_abs_error: f64,
    pub pass: bool,
    pub tolerance: f64,
}

impl OracleReport {
    fn new(check_name: &str, instances: usize, max_abs_error: f64, tolerance: f64) -> Self {
        OracleReport {
            check_name: check_name.to_string(),
            instances,
            max_abs_error,
            pass: max_abs_error <= tolerance,
            tolerance,
        }
    }
}

const EXACT_TOL: f64 = 1e-9;
const DIAG_LINK_TOL: f64 = 1e-12;
const MC_TOL_SE: f64 = 3.0;

fn random_predictions(m: usize, t: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<DMatrix<f64>> {
    (0..m).map(|_| DMatrix::from_fn(t, d, |_, _| rng.gen_range(-2.0..2.0))).collect()
}

/// Symmetric PSD matrix `F F^T` with `F` an `n x r` standard-normal factor.
fn random_psd(n: usize, r: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let f = DMatrix::<f64>::from_fn(n, r, |_, _| StandardNormal.sample(rng));
    &f * f.transpose()
}

fn logdet_ridged_eigen(k: &DMatrix<f64>, ridge: f64) -> f64 {
    let n = k.nrows();
    logdet_eigen(&(k + DMatrix::identity(n, n) * ridge))
}

/// Per-step causal rewards must telescope to the full ridged
/// log-determinant, checked against an eigenvalue route.
pub fn verify_logdet_decomposition(n_instances: usize, t_max: usize, seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    let mut instances = 0;

    // Single step: the only reward is the log of the ridged diagonal.
    {
        let dev = compute_deviations(&random_predictions(3, 1, 2, &mut rng)).unwrap();
        let kernel = build_kernel(&dev, 0.3).unwrap();
        let trace = cig_rewards(&kernel).unwrap();
        max_err = max_err.max((trace.rewards[0] - (kernel.diag(0) + 0.3).ln()).abs());
        instances += 1;
    }
    // Identical members: the kernel is zero and the total is T log ridge.
    {
        let preds = vec![DMatrix::from_element(7, 3, 0.5); 4];
        let dev = compute_deviations(&preds).unwrap();
        let trace = cig_rewards(&build_kernel(&dev, 0.7).unwrap()).unwrap();
        let total: f64 = trace.rewards.iter().sum();
        max_err = max_err.max((total - 7.0 * 0.7f64.ln()).abs());
        instances += 1;
    }
    while instances < n_instances.max(2) {
        let m = rng.gen_range(2..=6);
        let t = rng.gen_range(1..=t_max.max(1));
        let d = rng.gen_range(1..=8);
        let dev = compute_deviations(&random_predictions(m, t, d, &mut rng)).unwrap();
        let probe = build_kernel(&dev, 0.0).unwrap();
        let mean_diag = ((0..t).map(|i| probe.diag(i)).sum::<f64>() / t as f64).max(1e-3);
        // Ridge proportional to the diagonal scale keeps the ridged kernel
        // condition number around 1e4 or better, so a 1e-9 agreement between
        // the pivot and eigenvalue routes is actually resolvable in f64;
        // deviation kernels are rank-deficient for small M, and a vanishing
        // ridge would drown both routes in eigensolver noise.
        let ridge = mean_diag * 10f64.powf(rng.gen_range(-2.0..1.0));
        let kernel = build_kernel(&dev, ridge).unwrap();
        let total: f64 = cig_rewards(&kernel).unwrap().rewards.iter().sum();
        let reference = logdet_ridged_eigen(kernel.matrix(), ridge);
        max_err = max_err.max((total - reference).abs());
        instances += 1;
    }
    OracleReport::new("logdet_decomposition", instances, max_err, EXACT_TOL)
}

/// The determinant-lifting identity: the dense `Td x Td` log-determinant of
/// the noisy deviation covariance equals `(Td - M) log s2` plus the
/// log-determinant of the ridged `M x M` Gram.
pub fn verify_sylvester(n_instances: usize, seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    let mut instances = 0;

    let both_routes = |dev: &crate::kernel::DeviationTensor, sigma2: f64| -> (f64, f64) {
        let full = build_full_covariance_gram(dev, sigma2).unwrap();
        let td = full.td();
        let m = full.m();
        let dense = logdet_ridged_eigen(&full.materialize().unwrap(), sigma2);
        let gram =
            (td as f64 - m as f64) * sigma2.ln() + logdet_ridged_eigen(full.gram(), sigma2);
        (dense, gram)
    };

    // Zero deviations: both routes must give Td log s2.
    {
        let preds = vec![DMatrix::from_element(4, 3, 1.0); 3];
        let dev = compute_deviations(&preds).unwrap();
        let (dense, gram) = both_routes(&dev, 0.4);
        let exact = 12.0 * 0.4f64.ln();
        max_err = max_err.max((dense - exact).abs()).max((gram - exact).abs());
        instances += 1;
    }
    // Two members: centering makes the deviations an antisymmetric pair, so
    // the covariance is the rank-one outer product with closed-form
    // determinant (Td - 1) log s2 + log(s2 + |delta|^2).
    {
        let preds = random_predictions(2, 3, 4, &mut rng);
        let dev = compute_deviations(&preds).unwrap();
        let delta_sq: f64 = dev.member(0).iter().map(|x| x * x).sum();
        let sigma2: f64 = 0.9;
        let exact = 11.0 * sigma2.ln() + (sigma2 + delta_sq).ln();
        let (dense, gram) = both_routes(&dev, sigma2);
        max_err = max_err.max((dense - exact).abs()).max((gram - exact).abs());
        instances += 1;
    }
    while instances < n_instances.max(2) {
        let m = rng.gen_range(2..=6);
        let t = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=6);
        let sigma2 = 10f64.powf(rng.gen_range(-3.0..1.0));
        let dev = compute_deviations(&random_predictions(m, t, d, &mut rng)).unwrap();
        let (dense, gram) = both_routes(&dev, sigma2);
        max_err = max_err.max((dense - gram).abs());
        instances += 1;
    }
    OracleReport::new("sylvester_identity", instances, max_err, EXACT_TOL)
}

/// Eigenvalue-thresholded ranks: the full deviation covariance is capped at
/// M - 1 while the trace-reduced kernel is capped at min(T, (M-1)d),
/// swept over the full (M, T, d) grid.
pub fn verify_rank_bounds(n_instances: usize, seed: u64) -> OracleReport {
    let grid_m = [2usize, 3, 5];
    let grid_t = [3usize, 15, 40];
    let grid_d = [1usize, 4, 16];
    let cells = grid_m.len() * grid_t.len() * grid_d.len();
    let per_cell = n_instances.div_ceil(cells).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_excess = 0usize;
    let mut instances = 0;
    for &m in &grid_m {
        for &t in &grid_t {
            for &d in &grid_d {
                for _ in 0..per_cell {
                    let dev =
                        compute_deviations(&random_predictions(m, t, d, &mut rng)).unwrap();
                    let full = build_full_covariance_gram(&dev, 1.0).unwrap();
                    let c_rank =
                        numerical_rank(&sym_eigenvalues(&full.materialize().unwrap()), 1e-9);
                    let kernel = build_kernel(&dev, 0.0).unwrap();
                    let k_rank = numerical_rank(&sym_eigenvalues(kernel.matrix()), 1e-9);
                    worst_excess = worst_excess.max(c_rank.saturating_sub(m - 1));
                    worst_excess = worst_excess.max(k_rank.saturating_sub(t.min((m - 1) * d)));
                    instances += 1;
                }
            }
        }
    }
    OracleReport::new("rank_bounds", instances, worst_excess as f64, 0.0)
}

fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn mixture_logpdf(x: &DVector<f64>, means: &[DVector<f64>], sigma2: f64) -> f64 {
    let n = x.len() as f64;
    let exponents: Vec<f64> =
        means.iter().map(|mu| -(x - mu).norm_squared() / (2.0 * sigma2)).collect();
    logsumexp(&exponents)
        - (means.len() as f64).ln()
        - 0.5 * n * (2.0 * std::f64::consts::PI * sigma2).ln()
}

/// Monte-Carlo estimate of the entropy of an isotropic Gaussian mixture,
/// with the standard error of the estimate.
fn mixture_entropy_mc(
    means: &[DVector<f64>],
    sigma2: f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, f64) {
    let n = means[0].len();
    let sigma = sigma2.sqrt();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let mu = &means[rng.gen_range(0..means.len())];
        let x = DVector::from_fn(n, |i, _| {
            mu[i] + sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        });
        let nll = -mixture_logpdf(&x, means, sigma2);
        sum += nll;
        sum_sq += nll * nll;
    }
    let mean = sum / samples as f64;
    let var = (sum_sq / samples as f64 - mean * mean).max(0.0);
    (mean, (var / samples as f64).sqrt())
}

/// Entropy of the moment-matched Gaussian: half the log-determinant of
/// 2*pi*e times the mixture covariance.
fn moment_matched_entropy(means: &[DVector<f64>], sigma2: f64) -> f64 {
    let n = means[0].len();
    let m = means.len() as f64;
    let mean = means.iter().sum::<DVector<f64>>() / m;
    let mut cov = DMatrix::identity(n, n) * sigma2;
    for mu in means {
        let delta = mu - &mean;
        cov += &delta * delta.transpose() / m;
    }
    0.5 * (n as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()
        + logdet_eigen(&cov))
}

/// The moment-matched Gaussian entropy must upper-bound the Monte-Carlo
/// mixture entropy (maximum-entropy property), checked in units of the MC
/// standard error on small mixtures. The single-component case must match
/// with equality and far-separated components must open a gap of log M over
/// the component entropy.
pub fn verify_gaussian_bound(n_instances: usize, mc_samples: usize, seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_se = f64::NEG_INFINITY;
    let mut instances = 0;

    // Single component: the mixture is the Gaussian, equality two-sided.
    {
        let sigma2 = 0.8;
        let means = vec![DVector::from_vec(vec![0.3, -1.2, 0.7])];
        let (h, se) = mixture_entropy_mc(&means, sigma2, mc_samples, &mut rng);
        let bound = moment_matched_entropy(&means, sigma2);
        worst_se = worst_se.max((h - bound).abs() / se);
        instances += 1;
    }
    // Far-separated components: entropy is the component entropy plus log M,
    // still below the moment-matched bound.
    {
        let sigma2: f64 = 0.5;
        let n = 2;
        let m = 3;
        let sep = 60.0 * sigma2.sqrt();
        let means: Vec<DVector<f64>> = (0..m)
            .map(|j| DVector::from_fn(n, |i, _| if i == 0 { j as f64 * sep } else { 0.0 }))
            .collect();
        let (h, se) = mixture_entropy_mc(&means, sigma2, mc_samples, &mut rng);
        let component =
            0.5 * n as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma2).ln();
        let expected = component + (m as f64).ln();
        worst_se = worst_se.max((h - expected).abs() / se);
        let bound = moment_matched_entropy(&means, sigma2);
        worst_se = worst_se.max((h - bound) / se);
        instances += 1;
    }
    while instances < n_instances.max(2) {
        let n = rng.gen_range(1..=6);
        let m = rng.gen_range(1..=4);
        let sigma2 = rng.gen_range(0.1..2.0);
        let spread = rng.gen_range(0.5..3.0);
        let means: Vec<DVector<f64>> = (0..m)
            .map(|_| {
                DVector::from_fn(n, |_, _| {
                    spread * <StandardNormal as Distribution<f64>>::sample(&StandardNormal,
                        &mut rng)
                })
            })
            .collect();
        let (h, se) = mixture_entropy_mc(&means, sigma2, mc_samples, &mut rng);
        let bound = moment_matched_entropy(&means, sigma2);
        worst_se = worst_se.max((h - bound) / se);
        instances += 1;
    }
    OracleReport::new("gaussian_entropy_bound", instances, worst_se.max(0.0), MC_TOL_SE)
}

/// Assemble a T x T kernel from a (T-1) x (T-1) prefix block, a cross
/// column, and a final diagonal entry, mirrored to exact symmetry.
fn bordered_kernel(prefix: &DMatrix<f64>, cross: &DVector<f64>, corner: f64) -> DMatrix<f64> {
    let t = prefix.nrows() + 1;
    DMatrix::from_fn(t, t, |i, j| {
        if i < t - 1 && j < t - 1 {
            prefix[(i, j)]
        } else if i == t - 1 && j == t - 1 {
            corner
        } else if i == t - 1 {
            cross[j]
        } else {
            cross[i]
        }
    })
}

/// Last-step causal reward of a hand-assembled kernel.
fn last_reward(kernel: DMatrix<f64>, ridge: f64) -> f64 {
    let k = KernelMatrix::from_matrix(kernel, ridge).unwrap();
    *cig_rewards(&k).unwrap().rewards.last().unwrap()
}

/// Structural and limiting-case properties of the reward:
/// ridged log-determinant monotonicity and concavity in the PSD order;
/// exact lifelong recovery under orthogonal disagreement; the aleatoric
/// band under fully redundant disagreement (with its exact interior form
/// and the duplicated-step endpoints); and the frontier-inactivity bounds
/// on the gap to the diagonal-only reward.
pub fn verify_propositions(n_instances: usize, seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    let mut instances = 0;
    let n = n_instances.max(1);

    // Monotonicity: growing the kernel in the PSD order cannot lower the
    // ridged log-determinant.
    for _ in 0..n {
        let t = rng.gen_range(1..=12);
        let s = rng.gen_range(1e-3..5.0);
        let k = random_psd(t, rng.gen_range(1..=t + 2), &mut rng);
        let bigger = &k + random_psd(t, rng.gen_range(1..=t + 2), &mut rng);
        let gap = logdet_ridged_eigen(&k, s) - logdet_ridged_eigen(&bigger, s);
        max_err = max_err.max(gap.max(0.0));
        instances += 1;
    }
    // Concavity of the ridged log-determinant over PSD kernels.
    for _ in 0..n {
        let t = rng.gen_range(1..=12);
        let s = rng.gen_range(1e-3..5.0);
        let lam = rng.gen_range(0.05..0.95);
        let a = random_psd(t, rng.gen_range(1..=t + 2), &mut rng);
        let b = random_psd(t, rng.gen_range(1..=t + 2), &mut rng);
        let blend = &a * lam + &b * (1.0 - lam);
        let gap = lam * logdet_ridged_eigen(&a, s) + (1.0 - lam) * logdet_ridged_eigen(&b, s)
            - logdet_ridged_eigen(&blend, s);
        max_err = max_err.max(gap.max(0.0));
        instances += 1;
    }
    // Orthogonal disagreement: zero cross column keeps the full ridged
    // diagonal as the reward.
    for _ in 0..n {
        let t = rng.gen_range(2..=10);
        let s = rng.gen_range(0.05..5.0);
        let prefix = random_psd(t - 1, t - 1, &mut rng);
        let corner = rng.gen_range(0.01..4.0);
        let kernel = bordered_kernel(&prefix, &DVector::zeros(t - 1), corner);
        let r = last_reward(kernel, s);
        max_err = max_err.max((r - (corner + s).ln()).abs());
        instances += 1;
    }
    // Redundant disagreement: rows in the prefix span confine the
    // exponentiated reward to the aleatoric band, and the interior value
    // has an exact quadratic-form expression.
    for _ in 0..n {
        let t = rng.gen_range(2..=10);
        let s = rng.gen_range(0.1..5.0);
        let prefix = random_psd(t - 1, t - 1, &mut rng);
        let alpha = DVector::from_fn(t - 1, |_, _| rng.gen_range(-1.5..1.5));
        let cross = &prefix * &alpha;
        let corner = alpha.dot(&cross);
        let kernel = bordered_kernel(&prefix, &cross, corner);
        let value = last_reward(kernel, s).exp();
        let band_hi = s * (1.0 + alpha.norm_squared());
        max_err = max_err.max((s - value).max(0.0) / s);
        max_err = max_err.max((value - band_hi).max(0.0) / band_hi);
        let ridged = &prefix + DMatrix::identity(t - 1, t - 1) * s;
        let solved = ridged
            .cholesky()
            .expect("ridged prefix is positive definite")
            .solve(&alpha);
        let exact = s * (1.0 + alpha.norm_squared() - s * alpha.dot(&solved));
        max_err = max_err.max((value - exact).abs() / exact);
        instances += 1;
    }
    // Duplicated step at both amplitude extremes: the band endpoints are
    // approached per the closed form s(2 - s/(a+s)).
    for i in 0..n.div_ceil(10).max(2) {
        let s = rng.gen_range(0.1..5.0);
        let a = if i % 2 == 0 { s * 1e3 } else { s * 1e-3 };
        let kernel = bordered_kernel(
            &DMatrix::from_element(1, 1, a),
            &DVector::from_element(1, a),
            a,
        );
        let value = last_reward(kernel, s).exp();
        let exact = s * (2.0 - s / (a + s));
        max_err = max_err.max((value - exact).abs() / exact);
        // Distance to the approached endpoint is exactly the closed-form
        // remainder, so a 1% margin on it is conservative.
        if i % 2 == 0 {
            max_err = max_err.max(((value - 2.0 * s).abs() - 1.01 * s * s / (a + s)).max(0.0));
        } else {
            max_err = max_err.max(((value - s).abs() - 1.01 * s * a / (a + s)).max(0.0));
        }
        instances += 1;
    }
    // Frontier inactivity: the gap between the diagonal-only and causal
    // rewards is nonnegative and bounded by -log(1 - (t-1) eps^2), with the
    // linear form 2 (t-1) eps^2 whenever (t-1) eps^2 <= 1/2.
    for _ in 0..n {
        let m = rng.gen_range(3..=6);
        let t = rng.gen_range(2..=10);
        let d = rng.gen_range(1..=4);
        let dev = compute_deviations(&random_predictions(m, t, d, &mut rng)).unwrap();
        let probe = build_kernel(&dev, 0.0).unwrap();
        let max_diag = (0..t).map(|i| probe.diag(i)).fold(0.0f64, f64::max);
        if max_diag <= 0.0 {
            continue;
        }
        let target = rng.gen_range(0.05..0.95);
        let eps = (target / (t - 1) as f64).sqrt();
        let s = max_diag / eps;
        let kernel = build_kernel(&dev, s).unwrap();
        let causal = cig_rewards(&kernel).unwrap().rewards;
        let diag_only = no_prefix_rewards(&kernel).unwrap().rewards;
        for step in 0..t {
            let gap = diag_only[step] - causal[step];
            max_err = max_err.max((-gap).max(0.0));
            let x = step as f64 * eps * eps;
            max_err = max_err.max((gap - -(1.0 - x).ln()).max(0.0));
            if x <= 0.5 {
                max_err = max_err.max((gap - 2.0 * x).max(0.0));
            }
        }
        instances += 1;
    }
    OracleReport::new("reward_propositions", instances, max_err, EXACT_TOL)
}

/// When every covariance block is a scalar multiple of the identity (built
/// here by giving each member one axis of a shared scalar deviation
/// pattern), the dense log-determinant collapses to
/// d * logdet(K + s2 d I_T) - d T log d.
pub fn verify_kronecker(n_instances: usize, seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    let mut instances = 0;
    while instances < n_instances.max(1) {
        let m0 = rng.gen_range(2..=4);
        let t = rng.gen_range(2..=6);
        let d = rng.gen_range(1..=5);
        let sigma2 = 10f64.powf(rng.gen_range(-2.0..0.5));
        // Scalar member deviations, centered so the axis embedding below
        // carries them through ensemble centering untouched.
        let mut b = DMatrix::from_fn(t, m0, |_, _| rng.gen_range(-2.0..2.0));
        for step in 0..t {
            let mean = b.row(step).sum() / m0 as f64;
            for k in 0..m0 {
                b[(step, k)] -= mean;
            }
        }
        let mut preds = Vec::with_capacity(m0 * d);
        for k in 0..m0 {
            for axis in 0..d {
                preds.push(DMatrix::from_fn(t, d, |step, i| {
                    if i == axis {
                        b[(step, k)]
                    } else {
                        0.0
                    }
                }));
            }
        }
        let dev = compute_deviations(&preds).unwrap();
        let full = build_full_covariance_gram(&dev, sigma2).unwrap();
        let dense = logdet_ridged_eigen(&full.materialize().unwrap(), sigma2);
        let kernel = build_kernel(&dev, 0.0).unwrap();
        let reduced = (d as f64)
            * logdet_ridged_eigen(kernel.matrix(), sigma2 * d as f64)
            - (d * t) as f64 * (d as f64).ln();
        max_err = max_err.max((dense - reduced).abs());
        instances += 1;
    }
    OracleReport::new("kronecker_identity", instances, max_err, EXACT_TOL)
}

/// The scaled-disagreement reward times the feature dimension must recover
/// the kernel diagonal exactly.
pub fn verify_p2e_link(n_instances: usize, seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    let mut instances = 0;
    while instances < n_instances.max(1) {
        let m = rng.gen_range(2..=6);
        let t = rng.gen_range(1..=10);
        let d = rng.gen_range(1..=16);
        let dev = compute_deviations(&random_predictions(m, t, d, &mut rng)).unwrap();
        let rewards = crate::baselines::p2e_reward(&dev).unwrap();
        let kernel = build_kernel(&dev, 0.0).unwrap();
        for (step, r) in rewards.iter().enumerate() {
            let diag = kernel.diag(step);
            let denom = diag.abs().max(f64::MIN_POSITIVE);
            max_err = max_err.max((r * d as f64 - diag).abs() / denom);
        }
        instances += 1;
    }
    OracleReport::new("scaled_disagreement_link", instances, max_err, DIAG_LINK_TOL)
}

/// Instance counts for one full or quick suite run.
#[derive(Debug, Clone, Copy)]
pub struct SuiteBudget {
    pub logdet: usize,
    pub logdet_t_max: usize,
    pub sylvester: usize,
    pub rank: usize,
    pub propositions: usize,
    pub gaussian_mixtures: usize,
    pub mc_samples: usize,
    pub kronecker: usize,
    pub diag_link: usize,
}

impl SuiteBudget {
    pub fn full() -> Self {
        SuiteBudget {
            logdet: 1000,
            logdet_t_max: 50,
            sylvester: 1000,
            rank: 27,
            propositions: 10_000,
            gaussian_mixtures: 50,
            mc_samples: 1_000_000,
            kronecker: 1000,
            diag_link: 1000,
        }
    }

    pub fn quick() -> Self {
        SuiteBudget {
            logdet: 50,
            logdet_t_max: 20,
            sylvester: 50,
            rank: 27,
            propositions: 200,
            gaussian_mixtures: 6,
            mc_samples: 100_000,
            kronecker: 50,
            diag_link: 50,
        }
    }
}

/// Run every check concurrently with per-check seed streams; report order is
/// fixed regardless of scheduling.
pub fn run_all(budget: &SuiteBudget, seed: u64) -> Vec<OracleReport> {
    let b = *budget;
    let checks: Vec<Box<dyn Fn() -> OracleReport + Send + Sync>> = vec![
        Box::new(move || verify_logdet_decomposition(b.logdet, b.logdet_t_max, seed)),
        Box::new(move || verify_sylvester(b.sylvester, seed.wrapping_add(1))),
        Box::new(move || verify_rank_bounds(b.rank, seed.wrapping_add(2))),
        Box::new(move || {
            verify_propositions(b.propositions, seed.wrapping_add(3))
        }),
        Box::new(move || {
            verify_gaussian_bound(b.gaussian_mixtures, b.mc_samples, seed.wrapping_add(4))
        }),
        Box::new(move || verify_kronecker(b.kronecker, seed.wrapping_add(5))),
        Box::new(move || verify_p2e_link(b.diag_link, seed.wrapping_add(6))),
    ];
    checks.par_iter().map(|check| check()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes_every_check() {
        let reports = run_all(&SuiteBudget::quick(), 7);
        assert_eq!(reports.len(), 7);
        for r in &reports {
            assert!(
                r.pass,
                "{} failed: max error {} vs tolerance {}",
                r.check_name, r.max_abs_error, r.tolerance
            );
            assert_eq!(r.pass, r.max_abs_error <= r.tolerance);
            assert!(r.instances > 0);
        }
    }

    #[test]
    fn mc_entropy_matches_single_gaussian_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let means = vec![DVector::from_vec(vec![1.0, -2.0])];
        let sigma2 = 1.3;
        let (h, se) = mixture_entropy_mc(&means, sigma2, 200_000, &mut rng);
        let exact = (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma2).ln();
        assert!((h - exact).abs() <= 3.0 * se, "h {h} vs exact {exact} (se {se})");
        assert!(se < 0.01);
    }

    #[test]
    fn mc_entropy_detects_the_separation_gap() {
        // Far-separated two-component mixture: entropy exceeds the single
        // Gaussian by ln 2, a gap the estimator must resolve at this sample
        // size. This is the teeth test: a broken estimator that ignored the
        // mixture structure would sit at the component entropy instead.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sigma2: f64 = 0.25;
        let means = vec![
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![40.0 * sigma2.sqrt()]),
        ];
        let (h, se) = mixture_entropy_mc(&means, sigma2, 200_000, &mut rng);
        let component = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma2).ln();
        assert!(h > component + 2f64.ln() - 3.0 * se);
        assert!(h < component + 2f64.ln() + 3.0 * se);
    }

    #[test]
    fn generic_deviations_saturate_the_rank_ceilings() {
        // Random deviations reach the bound almost surely, so equality (not
        // just inequality) is the expected outcome; a rank oracle that
        // undercounted would fail here.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dev = compute_deviations(&random_predictions(3, 8, 4, &mut rng)).unwrap();
        let full = build_full_covariance_gram(&dev, 1.0).unwrap();
        let c_rank = numerical_rank(&sym_eigenvalues(&full.materialize().unwrap()), 1e-9);
        assert_eq!(c_rank, 2);
        let kernel = build_kernel(&dev, 0.0).unwrap();
        let k_rank = numerical_rank(&sym_eigenvalues(kernel.matrix()), 1e-9);
        // Saturates the kernel bound: T = 8 equals (M - 1) d = 2 * 4.
        assert_eq!(k_rank, 8);
    }

    #[test]
    fn bordered_kernel_is_symmetric_and_places_entries() {
        let prefix = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let cross = DVector::from_vec(vec![0.1, 0.2]);
        let k = bordered_kernel(&prefix, &cross, 3.0);
        assert_eq!(k.nrows(), 3);
        assert_eq!(k[(2, 2)], 3.0);
        assert_eq!(k[(0, 2)], 0.1);
        assert_eq!(k[(2, 1)], 0.2);
        assert_eq!(k, k.transpose());
    }

    #[test]
    fn violation_is_detected_when_a_bound_is_tightened_dishonestly() {
        // Feed the gaussian machinery a bound lowered below the true
        // entropy; the SE-normalized excess must blow past the tolerance.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let means = vec![DVector::from_vec(vec![0.0, 0.0])];
        let sigma2 = 1.0;
        let (h, se) = mixture_entropy_mc(&means, sigma2, 100_000, &mut rng);
        let honest = moment_matched_entropy(&means, sigma2);
        let doctored = honest - 0.5;
        assert!((h - doctored) / se > MC_TOL_SE);
        assert!((h - honest) / se <= MC_TOL_SE);
    }
}
