//! Dense layers with explicit backward passes, in f64.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Fully connected layer `y = x W + b`, with `W` stored as (in, out).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
        let b = Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..bound));
        Self { w, b }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { w: Array2::zeros((fan_in, fan_out)), b: Array1::zeros(fan_out) }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.w.nrows(), self.w.ncols())
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    pub fn forward_vec(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter grads into `grad` and returns dL/dx.
    pub fn backward(&self, x: &ArrayView2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }

    pub fn backward_vec(&self, x: &ArrayView1<f64>, dy: &Array1<f64>, grad: &mut Linear) -> Array1<f64> {
        let outer = x.view().insert_axis(Axis(1)).dot(&dy.view().insert_axis(Axis(0)));
        grad.w += &outer;
        grad.b += dy;
        self.w.dot(dy)
    }
}

/// linear -> GELU -> linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub pre: Array2<f64>,
    pub act: Array2<f64>,
}

impl Mlp {
    pub fn new_uniform(rng: &mut ChaCha8Rng, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self { l1: Linear::new_uniform(rng, d_in, d_hidden), l2: Linear::new_uniform(rng, d_hidden, d_out) }
    }

    pub fn zeros_like(&self) -> Self {
        Self { l1: self.l1.zeros_like(), l2: self.l2.zeros_like() }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let pre = self.l1.forward(x);
        let act = pre.mapv(gelu);
        let out = self.l2.forward(&act.view());
        (out, MlpCache { pre, act })
    }

    pub fn backward(&self, x: &ArrayView2<f64>, cache: &MlpCache, dy: &Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let d_act = self.l2.backward(&cache.act.view(), dy, &mut grad.l2);
        let d_pre = d_act * &cache.pre.mapv(gelu_grad);
        self.l1.backward(x, &d_pre, &mut grad.l1)
    }
}

/// Parameter-free RMS normalization of each row: `y = x / sqrt(mean(x^2) + eps)`.
pub const RMS_EPS: f64 = 1e-6;

pub fn rms_norm_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let inv: Array1<f64> = x.map_axis(Axis(1), |r| 1.0 / (r.dot(&r) / d + RMS_EPS).sqrt());
    let y = x * &inv.view().insert_axis(Axis(1));
    (y, inv)
}

/// dL/dx for [`rms_norm_rows`] given its output `y`, scales `inv` and dL/dy.
pub fn rms_norm_rows_backward(y: &Array2<f64>, inv: &Array1<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let d = y.ncols() as f64;
    let mut dx = dy.clone();
    for ((mut dx_row, y_row), &s) in dx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))).zip(inv.iter()) {
        let proj = dx_row.dot(&y_row) / d;
        dx_row.zip_mut_with(&y_row, |g, &yv| *g = s * (*g - yv * proj));
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -1.2, -0.3, 0.0, 0.4, 1.7, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn rms_norm_backward_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_fn((3, 5), |_| rng.random_range(-2.0..2.0));
        let w = Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0));
        let loss = |x: &Array2<f64>| (rms_norm_rows(x).0 * &w).sum();
        let (y, inv) = rms_norm_rows(&x);
        let dx = rms_norm_rows_backward(&y, &inv, &w);
        for i in 0..3 {
            for j in 0..5 {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[[i, j]] += 1e-6;
                xm[[i, j]] -= 1e-6;
                let fd = (loss(&xp) - loss(&xm)) / 2e-6;
                assert!((fd - dx[[i, j]]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Linear::new_uniform(&mut rng, 16, 8);
        assert!(l.w.iter().chain(l.b.iter()).all(|v| v.abs() <= 0.25));
    }
}
