//! Data-driven + physics-informed loss, backpropagation through time, Adam,
//! early stopping and hyperparameter sweeps.
//!
//! For a window of `L` teacher-forced predictions `ŷ_0..ŷ_{L-1}`:
//!
//! ```text
//! L_dd = mean_{k, j∈obs} (x̂_k - x_{k+1})²                     (normalized units)
//! L_pi = mean_{k<L-1, j} ((ŷ_{k+1} - ŷ_k)/Δt - f(ŷ_k))²          (physical units)
//! L    = L_dd + α_pi · L_pi
//! ```
//!
//! The residual at the last index of a window is dropped.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, ObservationSplit, SystemSpec};
use crate::error::{invalid, Error, Result};
use crate::io::{fmt_f64, write_atomic};
use crate::network::{self, CellVariant, LstmParams, LstmState, LstmWeights};

/// Every knob of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_hidden: usize,
    pub window_len: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub alpha_pi: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub cell_variant: CellVariant,
    pub dd_units: DataLossUnits,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_hidden: 100,
            window_len: 64,
            batch_size: 32,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            alpha_pi: 0.01,
            max_epochs: 500,
            patience: 20,
            val_fraction: 0.15,
            seed: 0,
            cell_variant: CellVariant::Squashed,
            dd_units: DataLossUnits::Normalized,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 {
            return Err(invalid("window_len must be at least 2"));
        }
        if self.batch_size == 0 || self.n_hidden == 0 || self.max_epochs == 0 {
            return Err(invalid("batch_size, n_hidden and max_epochs must be positive"));
        }
        if !(self.alpha_pi >= 0.0 && self.alpha_pi.is_finite()) {
            return Err(invalid(format!("alpha_pi must be >= 0, got {}", self.alpha_pi)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(invalid("val_fraction must lie in (0, 1)"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning_rate must be positive"));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossWeights {
        LossWeights {
            alpha_pi: self.alpha_pi,
            dd_units: self.dd_units,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Scale on which the data-driven loss compares observations.
///
/// `Normalized` measures errors in z-scored units, so `L_dd` is comparable
/// across variables. `Physical` measures them in the system's own units, the
/// same scale as `L_pi`; it weights the physics term about `1/std²` less for
/// the same `alpha_pi`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataLossUnits {
    #[default]
    Normalized,
    Physical,
}

impl std::fmt::Display for DataLossUnits {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Normalized => "normalized",
            Self::Physical => "physical",
        })
    }
}

impl std::str::FromStr for DataLossUnits {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(Self::Normalized),
            "physical" => Ok(Self::Physical),
            other => Err(invalid(format!("unknown data-loss units `{other}` (normalized|physical)"))),
        }
    }
}

/// What the objective needs beyond the data: the physics weight and the
/// data-loss scale. A bare `f64` means `alpha_pi` with normalized units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha_pi: f64,
    pub dd_units: DataLossUnits,
}

impl From<f64> for LossWeights {
    fn from(alpha_pi: f64) -> Self {
        Self {
            alpha_pi,
            dd_units: DataLossUnits::Normalized,
        }
    }
}

/// A named reconstruction case with its default hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: &'static str,
    pub n_unmeasured: usize,
    pub n_hidden: usize,
    pub alpha_pi: f64,
}

pub const PRESETS: [Preset; 3] = [
    Preset {
        name: "case-i",
        n_unmeasured: 1,
        n_hidden: 100,
        alpha_pi: 0.01,
    },
    Preset {
        name: "case-ii",
        n_unmeasured: 3,
        n_hidden: 100,
        alpha_pi: 0.01,
    },
    Preset {
        name: "case-iii",
        n_unmeasured: 5,
        n_hidden: 50,
        alpha_pi: 0.001,
    },
];

pub fn preset(name: &str) -> Result<Preset> {
    PRESETS
        .iter()
        .find(|p| p.name == name)
        .copied()
        .ok_or_else(|| invalid(format!("unknown preset `{name}` (case-i, case-ii, case-iii)")))
}

impl Preset {
    pub fn split(&self, n_dim: usize) -> Result<ObservationSplit> {
        ObservationSplit::tail(n_dim, self.n_unmeasured)
    }

    pub fn apply(&self, config: &mut TrainConfig) {
        config.n_hidden = self.n_hidden;
        config.alpha_pi = self.alpha_pi;
    }
}

/// `(L_dd, L_pi, L_total, α_pi)` with `L_total = L_dd + α_pi·L_pi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_dd: f64,
    pub l_pi: f64,
    pub l_total: f64,
    pub alpha_pi: f64,
}

pub fn total_loss(l_dd: f64, l_pi: f64, alpha_pi: f64) -> Result<LossBreakdown> {
    if !(alpha_pi >= 0.0) {
        return Err(invalid(format!("alpha_pi must be >= 0, got {alpha_pi}")));
    }
    if !(l_dd >= 0.0 && l_pi >= 0.0) {
        return Err(invalid("loss terms must be nonnegative"));
    }
    Ok(LossBreakdown {
        l_dd,
        l_pi,
        l_total: l_dd + alpha_pi * l_pi,
        alpha_pi,
    })
}

/// Mean squared error over time steps and components.
pub fn data_driven_loss(pred_x: &[DVector<f64>], target_x: &[DVector<f64>]) -> Result<f64> {
    if pred_x.len() != target_x.len() || pred_x.is_empty() {
        return Err(invalid(format!(
            "prediction/target lengths {} and {} must match and be nonzero",
            pred_x.len(),
            target_x.len()
        )));
    }
    let width = pred_x[0].len();
    let mut sum = 0.0;
    for (p, t) in pred_x.iter().zip(target_x) {
        if p.len() != width || t.len() != width {
            return Err(invalid("prediction and target widths differ"));
        }
        sum += p.iter().zip(t.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(sum / (pred_x.len() * width) as f64)
}

/// Mean squared forward-difference residual of `dy/dt = f(y)` over a
/// sequence of full physical states.
pub fn physics_loss(pred_y: &[DVector<f64>], spec: &SystemSpec) -> Result<f64> {
    if pred_y.len() < 2 {
        return Err(invalid("physics loss needs at least two states"));
    }
    spec.validate()?;
    let n = spec.n_dim;
    if pred_y.iter().any(|y| y.len() != n) {
        return Err(invalid("state width does not match the system dimension"));
    }
    let mut f = vec![0.0; n];
    let mut sum = 0.0;
    for pair in pred_y.windows(2) {
        dynamics::rhs_into(pair[0].as_slice(), spec.forcing, &mut f);
        for j in 0..n {
            let r = (pair[1][j] - pair[0][j]) / spec.dt - f[j];
            sum += r * r;
        }
    }
    Ok(sum / ((pred_y.len() - 1) * n) as f64)
}

/// One training window: normalized inputs `x_0..x_{L-1}` and targets `x_1..x_L`.
#[derive(Debug, Clone)]
pub struct Window {
    pub inputs: Vec<DVector<f64>>,
    pub targets: Vec<DVector<f64>>,
}

impl Window {
    /// Cuts a window from `L + 1` consecutive normalized observations.
    pub fn from_sequence(seq: &[DVector<f64>]) -> Result<Self> {
        if seq.len() < 3 {
            return Err(invalid("a window needs at least 3 consecutive states"));
        }
        Ok(Self {
            inputs: seq[..seq.len() - 1].to_vec(),
            targets: seq[1..].to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Forward-only loss of one window, computed from the public building blocks.
pub fn window_loss(
    params: &LstmParams,
    window: &Window,
    spec: &SystemSpec,
    loss: impl Into<LossWeights>,
) -> Result<LossBreakdown> {
    let LossWeights { alpha_pi, dd_units } = loss.into();
    let out = network::open_loop(params, &window.inputs, &LstmState::zeros(params.n_hidden))?;
    let pred_x: Vec<_> = out.predictions.iter().map(|p| p.x_hat.clone()).collect();
    let l_dd = match dd_units {
        DataLossUnits::Normalized => data_driven_loss(&pred_x, &window.targets)?,
        DataLossUnits::Physical => {
            let phys = |v: &DVector<f64>| params.denormalize_observed(v);
            let p: Vec<_> = pred_x.iter().map(phys).collect();
            let t: Vec<_> = window.targets.iter().map(phys).collect();
            data_driven_loss(&p, &t)?
        }
    };
    let phys: Vec<_> = out
        .predictions
        .iter()
        .map(|p| params.prediction_physical(p))
        .collect();
    let l_pi = physics_loss(&phys, spec)?;
    total_loss(l_dd, l_pi, alpha_pi)
}

/// Exact reverse-mode gradient of the total window loss.
pub fn bptt_gradient(
    params: &LstmParams,
    window: &Window,
    spec: &SystemSpec,
    loss: impl Into<LossWeights>,
) -> Result<(LstmWeights, LossBreakdown)> {
    let loss = loss.into();
    let alpha_pi = loss.alpha_pi;
    if window.len() < 2 || window.targets.len() != window.len() {
        return Err(invalid("window must have >= 2 aligned input/target steps"));
    }
    if params.n_dim() != spec.n_dim {
        return Err(invalid(format!(
            "network predicts {} components, system has {}",
            params.n_dim(),
            spec.n_dim
        )));
    }
    let nh = params.n_hidden;
    let out = network::open_loop(params, &window.inputs, &LstmState::zeros(nh))?;
    let preds: Vec<DVector<f64>> = out.predictions.iter().map(|p| p.concat()).collect();
    let (g_out, l_dd, l_pi) = output_gradient(params, &preds, &window.targets, spec, loss);

    let grads = backward(params, &out.caches, &g_out);
    if !grads.is_finite() {
        return Err(Error::Numeric {
            what: "gradient",
            step: 0,
        });
    }
    Ok((grads, total_loss(l_dd, l_pi, alpha_pi)?))
}

/// Window loss terms and `∂L/∂ŷ_k` for normalized predictions in output
/// order `[x̂; ξ̂]`.
fn output_gradient(
    params: &LstmParams,
    preds: &[DVector<f64>],
    targets: &[DVector<f64>],
    spec: &SystemSpec,
    loss: LossWeights,
) -> (Vec<DVector<f64>>, f64, f64) {
    let alpha_pi = loss.alpha_pi;
    let nx = params.split.n_obs();
    let n = spec.n_dim;
    let len = preds.len();
    let mut g_out: Vec<DVector<f64>> = vec![DVector::zeros(n); len];

    // squared scale of a normalized error in the loss's units
    let dd_weight: Vec<f64> = params
        .split
        .observed()
        .iter()
        .map(|&k| match loss.dd_units {
            DataLossUnits::Normalized => 1.0,
            DataLossUnits::Physical => params.norm_std[k] * params.norm_std[k],
        })
        .collect();
    let dd_scale = 1.0 / (len * nx) as f64;
    let mut l_dd = 0.0;
    for (k, (p, t)) in preds.iter().zip(targets).enumerate() {
        for j in 0..nx {
            let e = p[j] - t[j];
            l_dd += dd_weight[j] * e * e;
            g_out[k][j] = 2.0 * dd_scale * dd_weight[j] * e;
        }
    }
    l_dd *= dd_scale;

    let phys: Vec<DVector<f64>> = preds.iter().map(|p| params.denormalize(p)).collect();
    let pi_scale = 1.0 / ((len - 1) * n) as f64;
    let mut l_pi = 0.0;
    let mut g_phys: Vec<Vec<f64>> = vec![vec![0.0; n]; len];
    let mut f = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut jt = vec![0.0; n];
    for k in 0..len - 1 {
        dynamics::rhs_into(phys[k].as_slice(), spec.forcing, &mut f);
        for j in 0..n {
            r[j] = (phys[k + 1][j] - phys[k][j]) / spec.dt - f[j];
            l_pi += r[j] * r[j];
            // weight of the residual in the total loss
            r[j] *= 2.0 * pi_scale * alpha_pi;
        }
        for j in 0..n {
            g_phys[k + 1][j] += r[j] / spec.dt;
            g_phys[k][j] -= r[j] / spec.dt;
        }
        // -J(ŷ_k)ᵀ r
        jt.fill(0.0);
        dynamics::jacobian_transpose_apply(phys[k].as_slice(), &r, &mut jt);
        for j in 0..n {
            g_phys[k][j] -= jt[j];
        }
    }
    l_pi *= pi_scale;
    if alpha_pi > 0.0 {
        for (k, g) in g_out.iter_mut().enumerate() {
            for (o, comp) in params.split.output_order().enumerate() {
                g[o] += g_phys[k][comp] * params.norm_std[comp];
            }
        }
    }
    (g_out, l_dd, l_pi)
}

/// Backpropagates output gradients `g_out[k] = ∂L/∂ŷ_k` through the readout
/// and the recurrence.
fn backward(params: &LstmParams, caches: &[network::StepCache], g_out: &[DVector<f64>]) -> LstmWeights {
    let nh = params.n_hidden;
    let nx = params.split.n_obs();
    let len = caches.len();
    let w = &params.weights;
    let stack = params.gate_stack();
    let squashed = params.variant == CellVariant::Squashed;

    let mut dz_all = DMatrix::<f64>::zeros(4 * nh, len);
    let mut dh_rec = DVector::<f64>::zeros(nh);
    let mut dc_rec = DVector::<f64>::zeros(nh);
    let mut dh = DVector::<f64>::zeros(nh);
    let mut dv = DVector::<f64>::zeros(nx + nh);

    for k in (0..len).rev() {
        let cache = &caches[k];
        dh.copy_from(&dh_rec);
        dh.gemv_tr(1.0, &w.w_dense, &g_out[k], 1.0);
        let g = cache.gates.as_slice();
        let mut dz = dz_all.column_mut(k);
        for j in 0..nh {
            let (i, f, o, gg) = (g[j], g[nh + j], g[2 * nh + j], g[3 * nh + j]);
            let tc = cache.tanh_c[j];
            let dc = dc_rec[j] + dh[j] * o * (1.0 - tc * tc);
            let du = if squashed {
                let c = cache.c[j];
                dc * c * (1.0 - c)
            } else {
                dc
            };
            dz[j] = du * gg * i * (1.0 - i);
            dz[nh + j] = du * cache.c_prev[j] * f * (1.0 - f);
            dz[2 * nh + j] = dh[j] * tc * o * (1.0 - o);
            dz[3 * nh + j] = du * i * (1.0 - gg * gg);
            dc_rec[j] = du * f;
        }
        dv.gemv_tr(1.0, &stack.w, &dz, 0.0);
        dh_rec.copy_from(&dv.rows(nx, nh));
    }

    let mut inputs = DMatrix::<f64>::zeros(nx + nh, len);
    let mut hidden = DMatrix::<f64>::zeros(nh, len);
    let mut g_mat = DMatrix::<f64>::zeros(g_out[0].len(), len);
    for k in 0..len {
        inputs.set_column(k, &caches[k].input);
        hidden.set_column(k, &caches[k].h);
        g_mat.set_column(k, &g_out[k]);
    }
    let dw_stack = &dz_all * inputs.transpose();
    let db_stack = dz_all.column_sum();

    let part = |m: &DMatrix<f64>, k: usize| m.rows(k * nh, nh).into_owned();
    let bpart = |v: &DVector<f64>, k: usize| v.rows(k * nh, nh).into_owned();
    LstmWeights {
        w_i: part(&dw_stack, 0),
        w_f: part(&dw_stack, 1),
        w_o: part(&dw_stack, 2),
        w_g: part(&dw_stack, 3),
        b_i: bpart(&db_stack, 0),
        b_f: bpart(&db_stack, 1),
        b_o: bpart(&db_stack, 2),
        b_g: bpart(&db_stack, 3),
        w_dense: &g_mat * hidden.transpose(),
        b_dense: g_mat.column_sum(),
    }
}

/// Teacher-forced pass over equal-length windows run side by side. Column
/// `k * n_windows + b` holds step `k` of window `b`.
struct BatchForward {
    n_windows: usize,
    len: usize,
    inputs: DMatrix<f64>,
    gates: DMatrix<f64>,
    c: DMatrix<f64>,
    tanh_c: DMatrix<f64>,
    h: DMatrix<f64>,
    outputs: DMatrix<f64>,
}

impl BatchForward {
    fn run(params: &LstmParams, windows: &[&Window]) -> Result<Self> {
        let nb = windows.len();
        let len = windows.first().map_or(0, |w| w.len());
        if len < 2 || windows.iter().any(|w| w.len() != len || w.targets.len() != len) {
            return Err(invalid("batched windows must share a length >= 2"));
        }
        let nh = params.n_hidden;
        let nx = params.split.n_obs();
        if windows.iter().any(|w| w.inputs[0].len() != nx) {
            return Err(invalid("window inputs do not match the network's observed dimension"));
        }
        let stack = params.gate_stack();
        let squashed = params.variant == CellVariant::Squashed;
        let cols = len * nb;
        let mut inputs = DMatrix::<f64>::zeros(nx + nh, cols);
        let mut gates = DMatrix::<f64>::zeros(4 * nh, cols);
        let mut c = DMatrix::<f64>::zeros(nh, cols);
        let mut tanh_c = DMatrix::<f64>::zeros(nh, cols);
        let mut h = DMatrix::<f64>::zeros(nh, cols);

        for k in 0..len {
            for (b, w) in windows.iter().enumerate() {
                let col = k * nb + b;
                inputs.view_mut((0, col), (nx, 1)).copy_from(&w.inputs[k]);
                if k > 0 {
                    let prev = h.column(col - nb).into_owned();
                    inputs.view_mut((nx, col), (nh, 1)).copy_from(&prev);
                }
            }
            let z = &stack.w * inputs.columns(k * nb, nb);
            for b in 0..nb {
                let col = k * nb + b;
                for j in 0..nh {
                    let i_g = network::sigmoid(z[(j, b)] + stack.b[j]);
                    let f_g = network::sigmoid(z[(nh + j, b)] + stack.b[nh + j]);
                    let o_g = network::sigmoid(z[(2 * nh + j, b)] + stack.b[2 * nh + j]);
                    let g_g = (z[(3 * nh + j, b)] + stack.b[3 * nh + j]).tanh();
                    gates[(j, col)] = i_g;
                    gates[(nh + j, col)] = f_g;
                    gates[(2 * nh + j, col)] = o_g;
                    gates[(3 * nh + j, col)] = g_g;
                    let c_prev = if k > 0 { c[(j, col - nb)] } else { 0.0 };
                    let u = f_g * c_prev + i_g * g_g;
                    let cj = if squashed { network::sigmoid(u) } else { u };
                    c[(j, col)] = cj;
                    tanh_c[(j, col)] = cj.tanh();
                    h[(j, col)] = tanh_c[(j, col)] * o_g;
                }
            }
        }
        let mut outputs = &params.weights.w_dense * &h;
        for mut col in outputs.column_iter_mut() {
            col += &params.weights.b_dense;
        }
        if outputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                what: "open-loop state",
                step: 0,
            });
        }
        Ok(Self {
            n_windows: nb,
            len,
            inputs,
            gates,
            c,
            tanh_c,
            h,
            outputs,
        })
    }

    fn predictions(&self, b: usize) -> Vec<DVector<f64>> {
        (0..self.len)
            .map(|k| self.outputs.column(k * self.n_windows + b).into_owned())
            .collect()
    }
}

/// Per-window losses of `windows`, evaluated side by side.
fn batch_losses(params: &LstmParams, windows: &[&Window], spec: &SystemSpec, loss: LossWeights) -> Result<Vec<LossBreakdown>> {
    let alpha_pi = loss.alpha_pi;
    let fwd = BatchForward::run(params, windows)?;
    windows
        .iter()
        .enumerate()
        .map(|(b, w)| {
            let (_, l_dd, l_pi) = output_gradient(params, &fwd.predictions(b), &w.targets, spec, loss);
            total_loss(l_dd, l_pi, alpha_pi)
        })
        .collect()
}

/// Sum of [`bptt_gradient`] over equal-length windows, computed side by side
/// so the recurrence runs as matrix-matrix products. Agrees with the
/// per-window sum up to floating-point summation order.
pub fn batch_gradient(
    params: &LstmParams,
    windows: &[&Window],
    spec: &SystemSpec,
    loss: impl Into<LossWeights>,
) -> Result<(LstmWeights, Vec<LossBreakdown>)> {
    let loss = loss.into();
    let alpha_pi = loss.alpha_pi;
    if params.n_dim() != spec.n_dim {
        return Err(invalid(format!(
            "network predicts {} components, system has {}",
            params.n_dim(),
            spec.n_dim
        )));
    }
    let fwd = BatchForward::run(params, windows)?;
    let (nb, len) = (fwd.n_windows, fwd.len);
    let nh = params.n_hidden;
    let nx = params.split.n_obs();
    let squashed = params.variant == CellVariant::Squashed;

    let mut g_all = DMatrix::<f64>::zeros(fwd.outputs.nrows(), len * nb);
    let mut losses = Vec::with_capacity(nb);
    for (b, w) in windows.iter().enumerate() {
        let (g_out, l_dd, l_pi) = output_gradient(params, &fwd.predictions(b), &w.targets, spec, loss);
        for (k, g) in g_out.iter().enumerate() {
            g_all.set_column(k * nb + b, g);
        }
        losses.push(total_loss(l_dd, l_pi, alpha_pi)?);
    }

    let stack = params.gate_stack();
    let dh_out = params.weights.w_dense.transpose() * &g_all;
    let mut dz_all = DMatrix::<f64>::zeros(4 * nh, len * nb);
    let mut dh_rec = DMatrix::<f64>::zeros(nh, nb);
    let mut dc_rec = DMatrix::<f64>::zeros(nh, nb);
    for k in (0..len).rev() {
        for b in 0..nb {
            let col = k * nb + b;
            for j in 0..nh {
                let (i, f, o, gg) = (
                    fwd.gates[(j, col)],
                    fwd.gates[(nh + j, col)],
                    fwd.gates[(2 * nh + j, col)],
                    fwd.gates[(3 * nh + j, col)],
                );
                let dh = dh_rec[(j, b)] + dh_out[(j, col)];
                let tc = fwd.tanh_c[(j, col)];
                let dc = dc_rec[(j, b)] + dh * o * (1.0 - tc * tc);
                let du = if squashed {
                    let c = fwd.c[(j, col)];
                    dc * c * (1.0 - c)
                } else {
                    dc
                };
                let c_prev = if k > 0 { fwd.c[(j, col - nb)] } else { 0.0 };
                dz_all[(j, col)] = du * gg * i * (1.0 - i);
                dz_all[(nh + j, col)] = du * c_prev * f * (1.0 - f);
                dz_all[(2 * nh + j, col)] = dh * tc * o * (1.0 - o);
                dz_all[(3 * nh + j, col)] = du * i * (1.0 - gg * gg);
                dc_rec[(j, b)] = du * f;
            }
        }
        let dv = stack.w.transpose() * dz_all.columns(k * nb, nb);
        dh_rec.copy_from(&dv.rows(nx, nh));
    }

    let dw_stack = &dz_all * fwd.inputs.transpose();
    let db_stack = dz_all.column_sum();
    let part = |m: &DMatrix<f64>, k: usize| m.rows(k * nh, nh).into_owned();
    let bpart = |v: &DVector<f64>, k: usize| v.rows(k * nh, nh).into_owned();
    let grads = LstmWeights {
        w_i: part(&dw_stack, 0),
        w_f: part(&dw_stack, 1),
        w_o: part(&dw_stack, 2),
        w_g: part(&dw_stack, 3),
        b_i: bpart(&db_stack, 0),
        b_f: bpart(&db_stack, 1),
        b_o: bpart(&db_stack, 2),
        b_g: bpart(&db_stack, 3),
        w_dense: &g_all * fwd.h.transpose(),
        b_dense: g_all.column_sum(),
    };
    if !grads.is_finite() {
        return Err(Error::Numeric {
            what: "gradient",
            step: 0,
        });
    }
    Ok((grads, losses))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: LstmWeights,
    pub v: LstmWeights,
    pub t: u64,
}

impl AdamMoments {
    pub fn new(like: &LstmWeights) -> Self {
        let mut zero = like.clone();
        zero.scale(0.0);
        Self {
            m: zero.clone(),
            v: zero,
            t: 0,
        }
    }
}

/// Bias-corrected Adam update of a flat parameter slice; `t` is the
/// 1-based step number.
pub fn adam_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for k in 0..params.len() {
        let g = grads[k];
        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[k] / c1;
        let v_hat = v[k] / c2;
        params[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

pub fn adam_step(params: &mut LstmWeights, grads: &LstmWeights, moments: &mut AdamMoments, cfg: &AdamConfig) {
    moments.t += 1;
    let t = moments.t;
    let g = grads.arrays();
    let m = moments.m.arrays_mut();
    let v = moments.v.arrays_mut();
    for (((p, g), m), v) in params.arrays_mut().into_iter().zip(g.iter()).zip(m).zip(v) {
        adam_update(p, g.3, m, v, t, cfg);
    }
}

/// Observed physical data plus the context needed to train on it.
///
/// Only the observed components are ever seen by training.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub observed: Vec<DVector<f64>>,
    pub split: ObservationSplit,
    pub spec: SystemSpec,
}

impl TrainingSet {
    pub fn from_trajectory(
        traj: &dynamics::Trajectory,
        split: &ObservationSplit,
        spec: &SystemSpec,
    ) -> Result<Self> {
        if traj.n_dim() != spec.n_dim {
            return Err(invalid(format!(
                "dataset has {} components but the system spec has {}",
                traj.n_dim(),
                spec.n_dim
            )));
        }
        let (observed, _) = dynamics::split_observations(traj, split)?;
        Ok(Self {
            observed,
            split: split.clone(),
            spec: *spec,
        })
    }
}

/// Per-component statistics for observed variables; unmeasured components
/// get the statistics pooled over all observed values.
pub fn normalization_stats(observed: &[DVector<f64>], split: &ObservationSplit) -> (DVector<f64>, DVector<f64>) {
    let n = split.n_dim();
    let nx = split.n_obs();
    let count = observed.len() as f64;
    let mut mean = DVector::zeros(n);
    let mut std = DVector::from_element(n, 1.0);
    let mut pooled_sum = 0.0;
    let mut pooled_sq = 0.0;
    for (j, &k) in split.observed().iter().enumerate() {
        let m = observed.iter().map(|x| x[j]).sum::<f64>() / count;
        let var = observed.iter().map(|x| (x[j] - m).powi(2)).sum::<f64>() / count;
        mean[k] = m;
        std[k] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        pooled_sum += observed.iter().map(|x| x[j]).sum::<f64>();
        pooled_sq += observed.iter().map(|x| x[j] * x[j]).sum::<f64>();
    }
    let total = count * nx as f64;
    let pm = pooled_sum / total;
    let pvar = (pooled_sq / total - pm * pm).max(0.0);
    let ps = if pvar.sqrt() > 1e-12 { pvar.sqrt() } else { 1.0 };
    for &k in split.unmeasured() {
        mean[k] = pm;
        std[k] = ps;
    }
    (mean, std)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("epoch,train_ldd,train_lpi,train_total,val_ldd,val_lpi,val_total\n");
        for e in &self.epochs {
            let cols = [
                e.train.l_dd,
                e.train.l_pi,
                e.train.l_total,
                e.val.l_dd,
                e.val.l_pi,
                e.val.l_total,
            ];
            out.push_str(&e.epoch.to_string());
            for c in cols {
                out.push(',');
                out.push_str(&fmt_f64(c));
            }
            out.push('\n');
        }
        out
    }
}

fn cut_windows(seq: &[DVector<f64>], window_len: usize) -> Vec<Window> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + window_len < seq.len() {
        out.push(Window {
            inputs: seq[start..start + window_len].to_vec(),
            targets: seq[start + 1..start + window_len + 1].to_vec(),
        });
        start += window_len;
    }
    out
}

fn mean_breakdown(losses: &[LossBreakdown], alpha_pi: f64) -> LossBreakdown {
    let n = losses.len() as f64;
    let l_dd = losses.iter().map(|l| l.l_dd).sum::<f64>() / n;
    let l_pi = losses.iter().map(|l| l.l_pi).sum::<f64>() / n;
    LossBreakdown {
        l_dd,
        l_pi,
        l_total: l_dd + alpha_pi * l_pi,
        alpha_pi,
    }
}

/// Chronological train/validation windows, normalized with training statistics.
pub struct PreparedData {
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub norm_mean: DVector<f64>,
    pub norm_std: DVector<f64>,
}

pub fn prepare(data: &TrainingSet, config: &TrainConfig) -> Result<PreparedData> {
    config.validate()?;
    data.spec.validate()?;
    data.split.validate(data.spec.n_dim)?;
    let total = data.observed.len();
    let n_val = (config.val_fraction * total as f64).floor() as usize;
    if n_val < config.window_len + 1 || total < n_val + config.window_len + 1 {
        return Err(invalid(format!(
            "dataset of {total} states is too short for window_len {} with val_fraction {}",
            config.window_len, config.val_fraction
        )));
    }
    let n_train = total - n_val;
    let (mean, std) = normalization_stats(&data.observed[..n_train], &data.split);
    let normalized: Vec<DVector<f64>> = data
        .observed
        .iter()
        .map(|x| {
            DVector::from_iterator(
                x.len(),
                data.split
                    .observed()
                    .iter()
                    .zip(x.iter())
                    .map(|(&k, v)| (v - mean[k]) / std[k]),
            )
        })
        .collect();
    let train = cut_windows(&normalized[..n_train], config.window_len);
    // validation shares the boundary state with the training region
    let val = cut_windows(&normalized[n_train - 1..], config.window_len);
    Ok(PreparedData {
        train,
        val,
        norm_mean: mean,
        norm_std: std,
    })
}

const EVAL_CHUNK: usize = 64;

/// Mean validation loss over windows.
pub fn evaluate_windows(
    params: &LstmParams,
    windows: &[Window],
    spec: &SystemSpec,
    loss: impl Into<LossWeights>,
) -> Result<LossBreakdown> {
    let loss = loss.into();
    if windows.is_empty() {
        return Err(invalid("no windows to evaluate"));
    }
    let losses = if windows.iter().all(|w| w.len() == windows[0].len() && w.len() >= 2) {
        let refs: Vec<&Window> = windows.iter().collect();
        let mut out = Vec::with_capacity(windows.len());
        for chunk in refs.chunks(EVAL_CHUNK) {
            out.extend(batch_losses(params, chunk, spec, loss)?);
        }
        out
    } else {
        windows
            .iter()
            .map(|w| window_loss(params, w, spec, loss))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(mean_breakdown(&losses, loss.alpha_pi))
}

/// Trains from a fresh initialization. See [`train_with`] for progress callbacks.
pub fn train(data: &TrainingSet, config: &TrainConfig) -> Result<(LstmParams, TrainHistory)> {
    train_with(data, config, &mut |_| {})
}

pub fn train_with(
    data: &TrainingSet,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(LstmParams, TrainHistory)> {
    let prepared = prepare(data, config)?;
    let mut params = network::init_params(&data.split, config.n_hidden, config.cell_variant, config.seed)?;
    params.norm_mean = prepared.norm_mean.clone();
    params.norm_std = prepared.norm_std.clone();
    train_prepared(params, &prepared, &data.spec, config, on_epoch)
}

/// Optimizes `params` (whose normalization must already be set) on prepared windows.
pub fn train_prepared(
    mut params: LstmParams,
    prepared: &PreparedData,
    spec: &SystemSpec,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(LstmParams, TrainHistory)> {
    config.validate()?;
    let adam = config.adam();
    let mut moments = AdamMoments::new(&params.weights);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..prepared.train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, LstmWeights)> = None;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut train_losses = Vec::with_capacity(order.len());
        for batch in order.chunks(config.batch_size) {
            let windows: Vec<&Window> = batch.iter().map(|&w| &prepared.train[w]).collect();
            let (mut grad, losses) = batch_gradient(&params, &windows, spec, config.loss())?;
            train_losses.extend(losses);
            grad.scale(1.0 / batch.len() as f64);
            if let Some(clip) = config.grad_clip {
                let norm = grad.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > clip {
                    grad.scale(clip / norm);
                }
            }
            adam_step(&mut params.weights, &grad, &mut moments, &adam);
        }
        let train_loss = mean_breakdown(&train_losses, config.alpha_pi);
        let val_loss = evaluate_windows(&params, &prepared.val, spec, config.loss())?;
        if !val_loss.l_total.is_finite() {
            return Err(Error::Numeric {
                what: "validation loss",
                step: epoch,
            });
        }
        let record = EpochRecord {
            epoch,
            train: train_loss,
            val: val_loss,
        };
        on_epoch(&record);
        epochs.push(record);
        let improved = best.as_ref().map_or(true, |b| val_loss.l_total < b.1);
        if improved {
            best = Some((epoch, val_loss.l_total, params.weights.clone()));
        } else if epoch - best.as_ref().expect("set on first epoch").0 >= config.patience.max(1) {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    let (best_epoch, _, weights) = best.expect("at least one epoch ran");
    params.weights = weights;
    Ok((
        params,
        TrainHistory {
            epochs,
            best_epoch,
            stop_reason,
        },
    ))
}

/// Hyperparameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub n_hidden: Vec<usize>,
    pub alpha_pi: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self::full()
    }
}

impl SweepGrid {
    /// `N_h ∈ {20, 50, 100}` × `α_pi ∈ {1e-9, …, 1e0}`.
    pub fn full() -> Self {
        Self {
            n_hidden: vec![20, 50, 100],
            alpha_pi: (-9..=0).map(|e| 10f64.powi(e)).collect(),
        }
    }

    pub fn points(&self) -> Vec<(usize, f64)> {
        self.n_hidden
            .iter()
            .flat_map(|&nh| self.alpha_pi.iter().map(move |&a| (nh, a)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub n_hidden: usize,
    pub alpha_pi: f64,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub val: Option<LossBreakdown>,
    pub error: Option<String>,
    pub checkpoint: Option<PathBuf>,
}

impl TrialRecord {
    fn rank_key(&self) -> f64 {
        self.val.map_or(f64::INFINITY, |v| v.l_total)
    }
}

pub const TRIAL_MANIFEST: &str = "trial.json";

/// Trains one model per grid point (seed = base seed + trial index) and
/// returns trials ranked by best validation loss, failed trials last.
///
/// With `out_dir`, each trial writes `trial_<k>/{checkpoint.txt,history.csv,trial.json}`;
/// trials whose `trial.json` already exists are loaded instead of retrained.
pub fn sweep(
    data: &TrainingSet,
    grid: &SweepGrid,
    base: &TrainConfig,
    out_dir: Option<&Path>,
    on_trial: &mut dyn FnMut(&TrialRecord),
) -> Result<Vec<TrialRecord>> {
    let points = grid.points();
    if points.is_empty() {
        return Err(invalid("sweep grid is empty"));
    }
    let mut records = Vec::with_capacity(points.len());
    for (index, (n_hidden, alpha_pi)) in points.into_iter().enumerate() {
        let trial_dir = out_dir.map(|d| d.join(format!("trial_{index:03}")));
        if let Some(dir) = &trial_dir {
            let manifest = dir.join(TRIAL_MANIFEST);
            if manifest.exists() {
                let record: TrialRecord = serde_json::from_slice(&fs::read(&manifest)?)?;
                on_trial(&record);
                records.push(record);
                continue;
            }
        }
        let config = TrainConfig {
            n_hidden,
            alpha_pi,
            seed: base.seed.wrapping_add(index as u64),
            ..base.clone()
        };
        let mut record = TrialRecord {
            index,
            n_hidden,
            alpha_pi,
            seed: config.seed,
            best_epoch: None,
            val: None,
            error: None,
            checkpoint: None,
        };
        match train(data, &config) {
            Ok((params, history)) => {
                record.best_epoch = Some(history.best_epoch);
                record.val = Some(history.best().val);
                if let Some(dir) = &trial_dir {
                    let ckpt = dir.join("checkpoint.txt");
                    network::save_checkpoint(&params, &ckpt)?;
                    write_atomic(&dir.join("history.csv"), history.to_csv_string().as_bytes())?;
                    record.checkpoint = Some(ckpt);
                }
            }
            Err(e) => record.error = Some(e.to_string()),
        }
        if let Some(dir) = &trial_dir {
            write_atomic(&dir.join(TRIAL_MANIFEST), &serde_json::to_vec_pretty(&record)?)?;
        }
        on_trial(&record);
        records.push(record);
    }
    records.sort_by(|a, b| a.rank_key().total_cmp(&b.rank_key()).then(a.index.cmp(&b.index)));
    Ok(records)
}

pub fn sweep_table_csv(records: &[TrialRecord]) -> String {
    let mut out = String::from("rank,trial,n_hidden,alpha_pi,seed,best_epoch,val_ldd,val_lpi,val_total,error\n");
    for (rank, r) in records.iter().enumerate() {
        let (dd, pi, tot) = r.val.map_or((String::new(), String::new(), String::new()), |v| {
            (fmt_f64(v.l_dd), fmt_f64(v.l_pi), fmt_f64(v.l_total))
        });
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            rank + 1,
            r.index,
            r.n_hidden,
            fmt_f64(r.alpha_pi),
            r.seed,
            r.best_epoch.map_or(String::new(), |e| e.to_string()),
            dd,
            pi,
            tot,
            r.error.as_deref().unwrap_or("").replace(',', ";"),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn data_driven_loss_examples() {
        let t = vec![DVector::from_vec(vec![1.0, -2.0]), DVector::from_vec(vec![0.5, 3.0])];
        assert_eq!(data_driven_loss(&t, &t).unwrap(), 0.0);
        let shifted: Vec<_> = t.iter().map(|v| v.add_scalar(1.0)).collect();
        assert_eq!(data_driven_loss(&shifted, &t).unwrap(), 1.0);
        let p = vec![DVector::from_vec(vec![1.0, 2.0])];
        let z = vec![DVector::from_vec(vec![0.0, 0.0])];
        assert_eq!(data_driven_loss(&p, &z).unwrap(), 2.5);
        assert!(data_driven_loss(&p, &t).is_err());
    }

    #[test]
    fn physics_loss_examples() {
        let spec4 = SystemSpec::new(4, 8.0, 0.01).unwrap();
        let y0 = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(physics_loss(&[y0.clone(), y0.clone()], &spec4).unwrap(), 39.0);
        let spec = SystemSpec::default();
        let eq = spec.equilibrium();
        assert_eq!(physics_loss(&[eq.clone(), eq.clone(), eq], &spec).unwrap(), 0.0);
        assert!(physics_loss(&[y0], &spec4).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.0, 5.0, 0.0).unwrap().l_total, 1.0);
        assert_relative_eq!(total_loss(1.0, 5.0, 0.01).unwrap().l_total, 1.05, epsilon = 1e-15);
        assert_eq!(total_loss(0.0, 0.0, 3.0).unwrap().l_total, 0.0);
        assert!(total_loss(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn adam_first_step() {
        let cfg = AdamConfig::default();
        let mut p = [0.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, &cfg);
        assert_relative_eq!(p[0], -1e-3, epsilon = 1e-10);

        let mut q = [0.5, -0.25];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        for t in 1..=10 {
            adam_update(&mut q, &[0.0, 0.0], &mut m, &mut v, t, &cfg);
        }
        assert_eq!(q, [0.5, -0.25]);

        let g = [0.3, -2.0, 1e-4];
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        adam_update(&mut a, &g, &mut [0.0; 3], &mut [0.0; 3], 1, &cfg);
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        adam_update(&mut b, &neg, &mut [0.0; 3], &mut [0.0; 3], 1, &cfg);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(*x, -*y);
            assert!(*x != 0.0);
        }
    }

    #[test]
    fn presets_match_case_definitions() {
        let i = preset("case-i").unwrap();
        assert_eq!((i.n_unmeasured, i.n_hidden, i.alpha_pi), (1, 100, 0.01));
        let ii = preset("case-ii").unwrap();
        assert_eq!((ii.n_unmeasured, ii.n_hidden, ii.alpha_pi), (3, 100, 0.01));
        let iii = preset("case-iii").unwrap();
        assert_eq!((iii.n_unmeasured, iii.n_hidden, iii.alpha_pi), (5, 50, 0.001));
        assert!(preset("case-iv").is_err());
        assert_eq!(SweepGrid::full().points().len(), 30);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { window_len: 1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { alpha_pi: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { val_fraction: 1.0, ..Default::default() }.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn unmeasured_stats_are_pooled_from_observed() {
        let split = ObservationSplit::tail(4, 1).unwrap();
        let obs = vec![
            DVector::from_vec(vec![0.0, 2.0, 4.0]),
            DVector::from_vec(vec![2.0, 2.0, 8.0]),
        ];
        let (mean, std) = normalization_stats(&obs, &split);
        assert_eq!(mean.as_slice(), &[1.0, 2.0, 6.0, 3.0]);
        assert_eq!(std[1], 1.0);
        let pooled = [0.0f64, 2.0, 4.0, 2.0, 2.0, 8.0];
        let var = pooled.iter().map(|v| (v - 3.0).powi(2)).sum::<f64>() / 6.0;
        assert_relative_eq!(std[3], var.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn windows_do_not_overlap() {
        let seq: Vec<_> = (0..10).map(|k| DVector::from_element(1, k as f64)).collect();
        let w = cut_windows(&seq, 3);
        assert_eq!(w.len(), 3);
        assert_eq!(w[1].inputs[0][0], 3.0);
        assert_eq!(w[1].targets[2][0], 6.0);
    }
}
