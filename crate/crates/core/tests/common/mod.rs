//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pilstm::dynamics::{ObservationSplit, SystemSpec};
use pilstm::network::{init_params, CellVariant, LstmParams};
use pilstm::training::{window_loss, LossWeights, Window};

pub fn random_vector(n: usize, seed: u64, scale: f64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(n, |_, _| rng.gen_range(-scale..scale))
}

/// N = 6, N_ξ = 2, N_h = 4, with perturbed weights and biases and
/// Lorenz-96-like normalization statistics.
pub fn tiny_params(seed: u64, variant: CellVariant) -> LstmParams {
    let split = ObservationSplit::tail(6, 2).unwrap();
    let mut p = init_params(&split, 4, variant, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    for arr in p.weights.arrays_mut() {
        for v in arr.iter_mut() {
            *v += rng.gen_range(-0.4..0.4);
        }
    }
    p.norm_mean = DVector::from_fn(6, |_, _| rng.gen_range(2.0..2.6));
    p.norm_std = DVector::from_fn(6, |_, _| rng.gen_range(3.3..3.9));
    p
}

pub fn tiny_window(p: &LstmParams, len: usize, seed: u64) -> Window {
    let nx = p.split.n_obs();
    let seq: Vec<_> = (0..=len)
        .map(|k| random_vector(nx, seed * 1000 + k as u64, 1.5))
        .collect();
    Window::from_sequence(&seq).unwrap()
}

/// Central-difference Jacobian of `f` at `x`.
pub fn fd_jacobian<F>(f: F, x: &DVector<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let m = f(x).len();
    let mut jac = DMatrix::zeros(m, x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    jac
}

/// Central-difference gradient of the forward-only window loss with respect
/// to every trainable parameter, in flat order.
pub fn fd_gradient(p: &LstmParams, window: &Window, spec: &SystemSpec, loss: impl Into<LossWeights>, h: f64) -> Vec<f64> {
    let loss = loss.into();
    let base = p.weights.to_flat();
    let mut q = p.clone();
    let mut flat = base.clone();
    let mut out = Vec::with_capacity(base.len());
    for k in 0..base.len() {
        flat[k] = base[k] + h;
        q.weights.set_flat(&flat);
        let lp = window_loss(&q, window, spec, loss).unwrap().l_total;
        flat[k] = base[k] - h;
        q.weights.set_flat(&flat);
        let lm = window_loss(&q, window, spec, loss).unwrap().l_total;
        flat[k] = base[k];
        out.push((lp - lm) / (2.0 * h));
    }
    out
}

pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Worst per-array relative 2-norm error `‖a − b‖ / ‖b‖` over the ten
/// parameter groups, with `(name, error)` of the worst group.
pub fn worst_group_error(p: &LstmParams, analytic: &[f64], reference: &[f64]) -> (&'static str, f64) {
    let mut offset = 0;
    let mut worst = ("", 0.0);
    for (name, _, _, data) in p.weights.arrays() {
        let n = data.len();
        let a = &analytic[offset..offset + n];
        let b = &reference[offset..offset + n];
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        let err = if norm == 0.0 { diff } else { diff / norm };
        if err > worst.1 {
            worst = (name, err);
        }
        offset += n;
    }
    worst
}
