//! Two-hidden-layer tanh perceptron with hand-rolled backpropagation.
//!
//! This is the only network shape the pipeline needs: dynamics-ensemble
//! members and the random-network distillation pair are all instances.
//! Parameters expose a flat view so optimizers, checkpoints and the
//! finite-difference gradient check all agree on one canonical ordering
//! (w1, b1, w2, b2, w3, b3; matrices in nalgebra's column-major order).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense network `out = W3 tanh(W2 tanh(W1 x + b1) + b2) + b3`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
    w3: DMatrix<f64>,
    b3: DVector<f64>,
}

/// Gradients in the same layout as [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
    w3: DMatrix<f64>,
    b3: DVector<f64>,
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
}

impl Mlp {
    /// Glorot-uniform weights, zero biases, fully determined by the seed.
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mlp {
            in_dim,
            hidden,
            out_dim,
            w1: glorot(hidden, in_dim, &mut rng),
            b1: DVector::zeros(hidden),
            w2: glorot(hidden, hidden, &mut rng),
            b2: DVector::zeros(hidden),
            w3: glorot(out_dim, hidden, &mut rng),
            b3: DVector::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let h1 = (&self.w1 * x + &self.b1).map(f64::tanh);
        let h2 = (&self.w2 * &h1 + &self.b2).map(f64::tanh);
        &self.w3 * h2 + &self.b3
    }

    /// Mean squared error per output element over the batch, plus its
    /// gradient: `loss = (1/(B*out_dim)) * sum |f(x_b) - y_b|^2`.
    pub fn loss_and_grad(&self, xs: &[DVector<f64>], ys: &[DVector<f64>]) -> (f64, MlpGrads) {
        assert!(!xs.is_empty() && xs.len() == ys.len(), "batch must be non-empty and aligned");
        let scale = 1.0 / (xs.len() * self.out_dim) as f64;
        let mut g = MlpGrads {
            w1: DMatrix::zeros(self.hidden, self.in_dim),
            b1: DVector::zeros(self.hidden),
            w2: DMatrix::zeros(self.hidden, self.hidden),
            b2: DVector::zeros(self.hidden),
            w3: DMatrix::zeros(self.out_dim, self.hidden),
            b3: DVector::zeros(self.out_dim),
        };
        let mut loss = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            let h1 = (&self.w1 * x + &self.b1).map(f64::tanh);
            let h2 = (&self.w2 * &h1 + &self.b2).map(f64::tanh);
            let out = &self.w3 * &h2 + &self.b3;
            let err = out - y;
            loss += err.norm_squared() * scale;

            let dy = err * (2.0 * scale);
            g.w3.ger(1.0, &dy, &h2, 1.0);
            g.b3 += &dy;
            let dh2 = self.w3.transpose() * &dy;
            let dz2 = dh2.zip_map(&h2, |g, h| g * (1.0 - h * h));
            g.w2.ger(1.0, &dz2, &h1, 1.0);
            g.b2 += &dz2;
            let dh1 = self.w2.transpose() * &dz2;
            let dz1 = dh1.zip_map(&h1, |g, h| g * (1.0 - h * h));
            g.w1.ger(1.0, &dz1, x, 1.0);
            g.b1 += &dz1;
        }
        (loss, g)
    }

    pub fn n_params(&self) -> usize {
        self.hidden * self.in_dim
            + self.hidden
            + self.hidden * self.hidden
            + self.hidden
            + self.out_dim * self.hidden
            + self.out_dim
    }

    /// Canonical flat view of the parameters.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for part in self.parts() {
            out.extend_from_slice(part);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "flat parameter length mismatch");
        let mut offset = 0;
        for part in self.parts_mut() {
            part.copy_from_slice(&flat[offset..offset + part.len()]);
            offset += part.len();
        }
    }

    fn parts(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
            self.w3.as_slice(),
            self.b3.as_slice(),
        ]
    }

    fn parts_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
            self.w3.as_mut_slice(),
            self.b3.as_mut_slice(),
        ]
    }
}

impl MlpGrads {
    /// Gradients flattened in the parameter ordering.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for part in [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
            self.w3.as_slice(),
            self.b3.as_slice(),
        ] {
            out.extend_from_slice(part);
        }
        out
    }
}

/// Central-difference gradient check on one random parameter coordinate.
///
/// Returns `(analytic, numeric)` for the loss at the given batch under a
/// `1e-5` perturbation of parameter `index`.
pub fn gradient_check_at(
    mlp: &Mlp,
    xs: &[DVector<f64>],
    ys: &[DVector<f64>],
    index: usize,
) -> (f64, f64) {
    const H: f64 = 1e-5;
    let (_, grads) = mlp.loss_and_grad(xs, ys);
    let analytic = grads.flat()[index];
    let mut params = mlp.flat_params();
    let orig = params[index];
    let mut probe = mlp.clone();
    params[index] = orig + H;
    probe.set_flat_params(&params);
    let (up, _) = probe.loss_and_grad(xs, ys);
    params[index] = orig - H;
    probe.set_flat_params(&params);
    let (down, _) = probe.loss_and_grad(xs, ys);
    (analytic, (up - down) / (2.0 * H))
}
