//! LSTM cell, dense readout, open/closed-loop evaluation and the closed-loop
//! Jacobian.
//!
//! Gate equations, with `v = [x; h]`:
//!
//! ```text
//! i = σ(W_i v + b_i)    f = σ(W_f v + b_f)    o = σ(W_o v + b_o)
//! g = tanh(W_g v + b_g)
//! c' = σ(f*c + i*g)     (CellVariant::Squashed)
//! c' = f*c + i*g        (CellVariant::Standard)
//! h' = tanh(c') * o
//! ŷ  = W_dense h' + b_dense   = [x̂; ξ̂]
//! ```
//!
//! Network inputs and outputs live in normalized units; `norm_mean` and
//! `norm_std` (indexed by physical component) convert back.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ObservationSplit, StateVector};
use crate::error::{invalid, Error, Result};
use crate::io::{fmt_f64, write_atomic};
use crate::lyapunov::TangentMap;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Which cell-state update to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellVariant {
    /// `c' = σ(f*c + i*g)`.
    #[default]
    Squashed,
    /// `c' = f*c + i*g`.
    Standard,
}

impl fmt::Display for CellVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellVariant::Squashed => "squashed",
            CellVariant::Standard => "standard",
        })
    }
}

impl FromStr for CellVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squashed" => Ok(CellVariant::Squashed),
            "standard" => Ok(CellVariant::Standard),
            other => Err(invalid(format!("unknown cell variant `{other}`"))),
        }
    }
}

/// `(N_x, N_ξ, N_h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmDims {
    pub n_obs: usize,
    pub n_unmeasured: usize,
    pub n_hidden: usize,
}

impl LstmDims {
    pub fn n_out(&self) -> usize {
        self.n_obs + self.n_unmeasured
    }

    pub fn n_in(&self) -> usize {
        self.n_obs + self.n_hidden
    }
}

/// The trainable arrays. Also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    pub w_i: DMatrix<f64>,
    pub w_f: DMatrix<f64>,
    pub w_o: DMatrix<f64>,
    pub w_g: DMatrix<f64>,
    pub b_i: DVector<f64>,
    pub b_f: DVector<f64>,
    pub b_o: DVector<f64>,
    pub b_g: DVector<f64>,
    pub w_dense: DMatrix<f64>,
    pub b_dense: DVector<f64>,
}

pub const WEIGHT_NAMES: [&str; 10] = [
    "w_i", "w_f", "w_o", "w_g", "b_i", "b_f", "b_o", "b_g", "w_dense", "b_dense",
];

impl LstmWeights {
    pub fn zeros(dims: LstmDims) -> Self {
        let gate = || DMatrix::zeros(dims.n_hidden, dims.n_in());
        let bias = || DVector::zeros(dims.n_hidden);
        Self {
            w_i: gate(),
            w_f: gate(),
            w_o: gate(),
            w_g: gate(),
            b_i: bias(),
            b_f: bias(),
            b_o: bias(),
            b_g: bias(),
            w_dense: DMatrix::zeros(dims.n_out(), dims.n_hidden),
            b_dense: DVector::zeros(dims.n_out()),
        }
    }

    /// Each array as `(name, rows, cols, column-major data)`.
    pub fn arrays(&self) -> [(&'static str, usize, usize, &[f64]); 10] {
        let m = |a: &DMatrix<f64>| (a.nrows(), a.ncols());
        let v = |a: &DVector<f64>| (a.len(), 1usize);
        [
            ("w_i", m(&self.w_i).0, m(&self.w_i).1, self.w_i.as_slice()),
            ("w_f", m(&self.w_f).0, m(&self.w_f).1, self.w_f.as_slice()),
            ("w_o", m(&self.w_o).0, m(&self.w_o).1, self.w_o.as_slice()),
            ("w_g", m(&self.w_g).0, m(&self.w_g).1, self.w_g.as_slice()),
            ("b_i", v(&self.b_i).0, 1, self.b_i.as_slice()),
            ("b_f", v(&self.b_f).0, 1, self.b_f.as_slice()),
            ("b_o", v(&self.b_o).0, 1, self.b_o.as_slice()),
            ("b_g", v(&self.b_g).0, 1, self.b_g.as_slice()),
            (
                "w_dense",
                m(&self.w_dense).0,
                m(&self.w_dense).1,
                self.w_dense.as_slice(),
            ),
            ("b_dense", v(&self.b_dense).0, 1, self.b_dense.as_slice()),
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut [f64]; 10] {
        [
            self.w_i.as_mut_slice(),
            self.w_f.as_mut_slice(),
            self.w_o.as_mut_slice(),
            self.w_g.as_mut_slice(),
            self.b_i.as_mut_slice(),
            self.b_f.as_mut_slice(),
            self.b_o.as_mut_slice(),
            self.b_g.as_mut_slice(),
            self.w_dense.as_mut_slice(),
            self.b_dense.as_mut_slice(),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.arrays().iter().map(|a| a.3.len()).sum()
    }

    /// All entries concatenated in [`WEIGHT_NAMES`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.arrays()
            .iter()
            .flat_map(|a| a.3.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for arr in self.arrays_mut() {
            let n = arr.len();
            arr.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        debug_assert_eq!(offset, flat.len());
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        let rhs = other.arrays();
        for (dst, src) in self.arrays_mut().into_iter().zip(rhs.iter()) {
            for (d, s) in dst.iter_mut().zip(src.3) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for arr in self.arrays_mut() {
            arr.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.3.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.arrays()
            .iter()
            .flat_map(|a| a.3.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Weights plus everything needed to interpret them.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub weights: LstmWeights,
    pub split: ObservationSplit,
    pub n_hidden: usize,
    pub variant: CellVariant,
    /// Per physical component.
    pub norm_mean: DVector<f64>,
    /// Per physical component, strictly positive.
    pub norm_std: DVector<f64>,
}

/// Cell and hidden vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub c: DVector<f64>,
    pub h: DVector<f64>,
}

impl LstmState {
    pub fn zeros(n_hidden: usize) -> Self {
        Self {
            c: DVector::zeros(n_hidden),
            h: DVector::zeros(n_hidden),
        }
    }

    /// `[c; h]`, the state of the closed-loop map.
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.c.len();
        DVector::from_fn(2 * n, |k, _| if k < n { self.c[k] } else { self.h[k - n] })
    }

    pub fn from_vector(s: &DVector<f64>) -> Self {
        let n = s.len() / 2;
        Self {
            c: s.rows(0, n).into_owned(),
            h: s.rows(n, n).into_owned(),
        }
    }

    fn is_finite(&self) -> bool {
        self.c.iter().chain(self.h.iter()).all(|v| v.is_finite())
    }
}

/// Gate outputs of one cell step and their pre-activations.
#[derive(Debug, Clone, PartialEq)]
pub struct GateActivations {
    pub i_gate: DVector<f64>,
    pub f_gate: DVector<f64>,
    pub o_gate: DVector<f64>,
    pub c_tilde: DVector<f64>,
    pub z_i: DVector<f64>,
    pub z_f: DVector<f64>,
    pub z_o: DVector<f64>,
    pub z_g: DVector<f64>,
}

/// Readout split into observed and reconstructed parts (normalized units).
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub x_hat: DVector<f64>,
    pub xi_hat: DVector<f64>,
}

impl Prediction {
    /// `[x̂; ξ̂]` in output order.
    pub fn concat(&self) -> DVector<f64> {
        let nx = self.x_hat.len();
        DVector::from_fn(nx + self.xi_hat.len(), |k, _| {
            if k < nx {
                self.x_hat[k]
            } else {
                self.xi_hat[k - nx]
            }
        })
    }
}

impl LstmParams {
    /// All weights and biases zero, identity normalization.
    pub fn zeros(split: &ObservationSplit, n_hidden: usize, variant: CellVariant) -> Self {
        let n = split.n_dim();
        Self {
            weights: LstmWeights::zeros(LstmDims {
                n_obs: split.n_obs(),
                n_unmeasured: split.n_unmeasured(),
                n_hidden,
            }),
            split: split.clone(),
            n_hidden,
            variant,
            norm_mean: DVector::zeros(n),
            norm_std: DVector::from_element(n, 1.0),
        }
    }

    pub fn dims(&self) -> LstmDims {
        LstmDims {
            n_obs: self.split.n_obs(),
            n_unmeasured: self.split.n_unmeasured(),
            n_hidden: self.n_hidden,
        }
    }

    pub fn n_dim(&self) -> usize {
        self.split.n_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        let w = &self.weights;
        let gate_ok = [&w.w_i, &w.w_f, &w.w_o, &w.w_g]
            .iter()
            .all(|m| m.shape() == (d.n_hidden, d.n_in()));
        let bias_ok = [&w.b_i, &w.b_f, &w.b_o, &w.b_g]
            .iter()
            .all(|b| b.len() == d.n_hidden);
        let dense_ok =
            w.w_dense.shape() == (d.n_out(), d.n_hidden) && w.b_dense.len() == d.n_out();
        let norm_ok = self.norm_mean.len() == d.n_out() && self.norm_std.len() == d.n_out();
        if !(gate_ok && bias_ok && dense_ok && norm_ok) {
            return Err(invalid(format!("parameter shapes inconsistent with dims {d:?}")));
        }
        if self.norm_std.iter().any(|s| !(*s > 0.0)) {
            return Err(invalid("normalization std must be strictly positive"));
        }
        if !w.is_finite() || self.norm_mean.iter().any(|v| !v.is_finite()) {
            return Err(invalid("parameters contain non-finite values"));
        }
        Ok(())
    }

    /// Physical observed components → normalized network input.
    pub fn normalize_observed(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            self.split
                .observed()
                .iter()
                .zip(x.iter())
                .map(|(&k, v)| (v - self.norm_mean[k]) / self.norm_std[k]),
        )
    }

    /// Normalized `[x̂; ξ̂]` → physical full state in component order.
    pub fn denormalize(&self, y_hat: &DVector<f64>) -> StateVector {
        let mut y = DVector::zeros(self.n_dim());
        for (v, k) in y_hat.iter().zip(self.split.output_order()) {
            y[k] = v * self.norm_std[k] + self.norm_mean[k];
        }
        y
    }

    /// Observed components of a normalized `x` back in physical units.
    pub fn denormalize_observed(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            self.split
                .observed()
                .iter()
                .zip(x.iter())
                .map(|(&k, v)| v * self.norm_std[k] + self.norm_mean[k]),
        )
    }

    pub fn prediction_physical(&self, p: &Prediction) -> StateVector {
        self.denormalize(&p.concat())
    }

    pub(crate) fn gate_stack(&self) -> GateStack {
        GateStack::new(&self.weights)
    }
}

/// The four gate matrices stacked as `[W_i; W_f; W_o; W_g]`.
#[derive(Debug, Clone)]
pub(crate) struct GateStack {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub n_hidden: usize,
}

impl GateStack {
    pub fn new(weights: &LstmWeights) -> Self {
        let nh = weights.b_i.len();
        let nin = weights.w_i.ncols();
        let mut w = DMatrix::zeros(4 * nh, nin);
        let mut b = DVector::zeros(4 * nh);
        for (k, (wm, bv)) in [
            (&weights.w_i, &weights.b_i),
            (&weights.w_f, &weights.b_f),
            (&weights.w_o, &weights.b_o),
            (&weights.w_g, &weights.b_g),
        ]
        .into_iter()
        .enumerate()
        {
            w.rows_mut(k * nh, nh).copy_from(wm);
            b.rows_mut(k * nh, nh).copy_from(bv);
        }
        Self { w, b, n_hidden: nh }
    }
}

/// Everything one forward step leaves behind for backpropagation.
#[derive(Debug, Clone)]
pub struct StepCache {
    /// `[x; h_prev]`.
    pub input: DVector<f64>,
    /// Stacked gate outputs `[i; f; o; g]`.
    pub gates: DVector<f64>,
    /// Stacked pre-activations.
    pub z: DVector<f64>,
    pub c_prev: DVector<f64>,
    pub c: DVector<f64>,
    pub tanh_c: DVector<f64>,
    pub h: DVector<f64>,
}

impl StepCache {
    fn activations(&self) -> GateActivations {
        let nh = self.c.len();
        let part = |v: &DVector<f64>, k: usize| v.rows(k * nh, nh).into_owned();
        GateActivations {
            i_gate: part(&self.gates, 0),
            f_gate: part(&self.gates, 1),
            o_gate: part(&self.gates, 2),
            c_tilde: part(&self.gates, 3),
            z_i: part(&self.z, 0),
            z_f: part(&self.z, 1),
            z_o: part(&self.z, 2),
            z_g: part(&self.z, 3),
        }
    }
}

pub(crate) fn forward_step(
    stack: &GateStack,
    variant: CellVariant,
    x: &[f64],
    state: &LstmState,
) -> StepCache {
    let nh = stack.n_hidden;
    let nx = x.len();
    let mut input = DVector::zeros(nx + nh);
    input.as_mut_slice()[..nx].copy_from_slice(x);
    input.as_mut_slice()[nx..].copy_from_slice(state.h.as_slice());
    let mut z = stack.b.clone();
    z.gemv(1.0, &stack.w, &input, 1.0);
    let mut gates = DVector::zeros(4 * nh);
    let mut c = DVector::zeros(nh);
    let mut tanh_c = DVector::zeros(nh);
    let mut h = DVector::zeros(nh);
    {
        let zs = z.as_slice();
        let g = gates.as_mut_slice();
        for k in 0..3 * nh {
            g[k] = sigmoid(zs[k]);
        }
        for k in 3 * nh..4 * nh {
            g[k] = zs[k].tanh();
        }
        for j in 0..nh {
            let u = g[nh + j] * state.c[j] + g[j] * g[3 * nh + j];
            c[j] = match variant {
                CellVariant::Squashed => sigmoid(u),
                CellVariant::Standard => u,
            };
            tanh_c[j] = c[j].tanh();
            h[j] = tanh_c[j] * g[2 * nh + j];
        }
    }
    StepCache {
        input,
        gates,
        z,
        c_prev: state.c.clone(),
        c,
        tanh_c,
        h,
    }
}

fn check_shapes(params: &LstmParams, x: &DVector<f64>, state: &LstmState) -> Result<()> {
    let d = params.dims();
    if x.len() != d.n_obs || state.c.len() != d.n_hidden || state.h.len() != d.n_hidden {
        return Err(invalid(format!(
            "input/state shapes ({}, {}, {}) do not match dims {d:?}",
            x.len(),
            state.c.len(),
            state.h.len()
        )));
    }
    Ok(())
}

/// One cell update driven by the (normalized) observation `x`.
pub fn cell_step(
    params: &LstmParams,
    x: &DVector<f64>,
    state: &LstmState,
) -> Result<(LstmState, GateActivations)> {
    check_shapes(params, x, state)?;
    let cache = forward_step(&params.gate_stack(), params.variant, x.as_slice(), state);
    let acts = cache.activations();
    Ok((
        LstmState {
            c: cache.c,
            h: cache.h,
        },
        acts,
    ))
}

/// Dense readout `W_dense h + b_dense`, split into `(x̂, ξ̂)`.
pub fn readout(params: &LstmParams, h: &DVector<f64>) -> Result<Prediction> {
    if h.len() != params.n_hidden {
        return Err(invalid(format!(
            "hidden vector has {} entries, expected {}",
            h.len(),
            params.n_hidden
        )));
    }
    Ok(readout_unchecked(&params.weights, params.split.n_obs(), h))
}

fn readout_unchecked(w: &LstmWeights, n_obs: usize, h: &DVector<f64>) -> Prediction {
    let mut y = w.b_dense.clone();
    y.gemv(1.0, &w.w_dense, h, 1.0);
    let n_out = y.len();
    Prediction {
        x_hat: y.rows(0, n_obs).into_owned(),
        xi_hat: y.rows(n_obs, n_out - n_obs).into_owned(),
    }
}

/// Result of a teacher-forced pass.
#[derive(Debug, Clone)]
pub struct OpenLoopOutput {
    /// `predictions[k]` is the estimate of the state at `t_{k+1}`.
    pub predictions: Vec<Prediction>,
    pub final_state: LstmState,
    pub caches: Vec<StepCache>,
}

/// Teacher-forced pass over normalized observations.
pub fn open_loop(
    params: &LstmParams,
    x_seq: &[DVector<f64>],
    s0: &LstmState,
) -> Result<OpenLoopOutput> {
    if x_seq.is_empty() {
        return Err(invalid("open loop needs at least one input"));
    }
    check_shapes(params, &x_seq[0], s0)?;
    let stack = params.gate_stack();
    let n_obs = params.split.n_obs();
    let mut state = s0.clone();
    let mut predictions = Vec::with_capacity(x_seq.len());
    let mut caches = Vec::with_capacity(x_seq.len());
    for (step, x) in x_seq.iter().enumerate() {
        if x.len() != n_obs {
            return Err(invalid(format!("input {step} has {} entries", x.len())));
        }
        let cache = forward_step(&stack, params.variant, x.as_slice(), &state);
        state = LstmState {
            c: cache.c.clone(),
            h: cache.h.clone(),
        };
        if !state.is_finite() {
            return Err(Error::Numeric {
                what: "open-loop state",
                step,
            });
        }
        predictions.push(readout_unchecked(&params.weights, n_obs, &state.h));
        caches.push(cache);
    }
    Ok(OpenLoopOutput {
        predictions,
        final_state: state,
        caches,
    })
}

/// Open-loop pass that keeps only the final state (no caches).
pub fn washout(params: &LstmParams, x_seq: &[DVector<f64>], s0: &LstmState) -> Result<LstmState> {
    let stack = params.gate_stack();
    let mut state = s0.clone();
    for (step, x) in x_seq.iter().enumerate() {
        check_shapes(params, x, &state)?;
        let cache = forward_step(&stack, params.variant, x.as_slice(), &state);
        state = LstmState {
            c: cache.c,
            h: cache.h,
        };
        if !state.is_finite() {
            return Err(Error::Numeric {
                what: "washout state",
                step,
            });
        }
    }
    Ok(state)
}

/// Autonomous rollout: step 0 consumes `x0`, every later step consumes the
/// observed part of the previous prediction.
pub fn closed_loop(
    params: &LstmParams,
    s0: &LstmState,
    x0: &DVector<f64>,
    n_steps: usize,
) -> Result<Vec<Prediction>> {
    check_shapes(params, x0, s0)?;
    let stack = params.gate_stack();
    let n_obs = params.split.n_obs();
    let mut state = s0.clone();
    let mut x = x0.clone();
    let mut out = Vec::with_capacity(n_steps);
    for step in 0..n_steps {
        let cache = forward_step(&stack, params.variant, x.as_slice(), &state);
        state = LstmState {
            c: cache.c,
            h: cache.h,
        };
        let p = readout_unchecked(&params.weights, n_obs, &state.h);
        if !state.is_finite() || p.x_hat.iter().chain(p.xi_hat.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step });
        }
        x = p.x_hat.clone();
        out.push(p);
    }
    Ok(out)
}

/// Jacobian of `(c, h) ↦ (c', h')` with the input `x` held fixed.
/// Rows and columns are ordered `[c; h]`.
pub fn cell_jacobian(params: &LstmParams, x: &DVector<f64>, state: &LstmState) -> Result<DMatrix<f64>> {
    check_shapes(params, x, state)?;
    let stack = params.gate_stack();
    let nx = params.split.n_obs();
    let dz_dh = stack.w.columns(nx, params.n_hidden).into_owned();
    Ok(state_jacobian(&stack, params.variant, x.as_slice(), state, &dz_dh))
}

/// Jacobian of the autonomous closed-loop map on `s = [c; h]`, where the
/// input is the observed part of the readout of `h`.
pub fn closed_loop_jacobian(params: &LstmParams, state: &LstmState) -> Result<DMatrix<f64>> {
    let map = NetworkMap::new(params)?;
    if state.c.len() != params.n_hidden || state.h.len() != params.n_hidden {
        return Err(invalid("state does not match the hidden size"));
    }
    let x = map.feedback_input(&state.h);
    Ok(state_jacobian(
        &map.stack,
        params.variant,
        x.as_slice(),
        state,
        &map.dz_dh,
    ))
}

/// Shared chain rule; `dz_dh` is the total derivative of the stacked
/// pre-activations with respect to `h` (including any feedback path).
fn state_jacobian(
    stack: &GateStack,
    variant: CellVariant,
    x: &[f64],
    state: &LstmState,
    dz_dh: &DMatrix<f64>,
) -> DMatrix<f64> {
    let nh = stack.n_hidden;
    let cache = forward_step(stack, variant, x, state);
    let coef = CellCoefficients::new(&cache, variant);
    let mut jac = DMatrix::zeros(2 * nh, 2 * nh);
    for j in 0..nh {
        // ∂c'/∂c and ∂h'/∂c are diagonal.
        jac[(j, j)] = coef.dc_du[j] * coef.f[j];
        jac[(nh + j, j)] = coef.dh_dc[j] * coef.dc_du[j] * coef.f[j];
    }
    for col in 0..nh {
        let dz = dz_dh.column(col);
        for j in 0..nh {
            let du = coef.du_dzi[j] * dz[j]
                + coef.du_dzf[j] * dz[nh + j]
                + coef.du_dzg[j] * dz[3 * nh + j];
            let dc = coef.dc_du[j] * du;
            jac[(j, nh + col)] = dc;
            jac[(nh + j, nh + col)] = coef.dh_dc[j] * dc + coef.dh_dzo[j] * dz[2 * nh + j];
        }
    }
    jac
}

/// Local partial derivatives of one cell step.
struct CellCoefficients {
    f: Vec<f64>,
    dc_du: Vec<f64>,
    du_dzi: Vec<f64>,
    du_dzf: Vec<f64>,
    du_dzg: Vec<f64>,
    dh_dc: Vec<f64>,
    dh_dzo: Vec<f64>,
}

impl CellCoefficients {
    fn new(cache: &StepCache, variant: CellVariant) -> Self {
        let nh = cache.c.len();
        let g = cache.gates.as_slice();
        let mut s = Self {
            f: vec![0.0; nh],
            dc_du: vec![0.0; nh],
            du_dzi: vec![0.0; nh],
            du_dzf: vec![0.0; nh],
            du_dzg: vec![0.0; nh],
            dh_dc: vec![0.0; nh],
            dh_dzo: vec![0.0; nh],
        };
        for j in 0..nh {
            let (i, f, o, gg) = (g[j], g[nh + j], g[2 * nh + j], g[3 * nh + j]);
            let c = cache.c[j];
            let tc = cache.tanh_c[j];
            s.f[j] = f;
            s.dc_du[j] = match variant {
                CellVariant::Squashed => c * (1.0 - c),
                CellVariant::Standard => 1.0,
            };
            s.du_dzi[j] = gg * i * (1.0 - i);
            s.du_dzf[j] = cache.c_prev[j] * f * (1.0 - f);
            s.du_dzg[j] = i * (1.0 - gg * gg);
            s.dh_dc[j] = o * (1.0 - tc * tc);
            s.dh_dzo[j] = tc * o * (1.0 - o);
        }
        s
    }
}

/// The closed-loop network as a discrete map on `s = [c; h]`.
#[derive(Debug, Clone)]
pub struct NetworkMap<'a> {
    params: &'a LstmParams,
    stack: GateStack,
    /// `W_h + W_x · W_dense[obs rows]`: derivative of the pre-activations w.r.t. `h`.
    dz_dh: DMatrix<f64>,
}

impl<'a> NetworkMap<'a> {
    pub fn new(params: &'a LstmParams) -> Result<Self> {
        params.validate()?;
        let stack = params.gate_stack();
        let nx = params.split.n_obs();
        let nh = params.n_hidden;
        let w_x = stack.w.columns(0, nx);
        let w_dense_obs = params.weights.w_dense.rows(0, nx);
        let dz_dh = stack.w.columns(nx, nh).into_owned() + w_x * w_dense_obs;
        Ok(Self {
            params,
            stack,
            dz_dh,
        })
    }

    fn feedback_input(&self, h: &DVector<f64>) -> DVector<f64> {
        readout_unchecked(&self.params.weights, self.params.split.n_obs(), h).x_hat
    }

    pub fn params(&self) -> &LstmParams {
        self.params
    }

    /// Steps the map and returns the new state with its readout.
    pub fn step(&self, state: &LstmState) -> (LstmState, Prediction) {
        let x = self.feedback_input(&state.h);
        let cache = forward_step(&self.stack, self.params.variant, x.as_slice(), state);
        let next = LstmState {
            c: cache.c,
            h: cache.h,
        };
        let p = readout_unchecked(&self.params.weights, self.params.split.n_obs(), &next.h);
        (next, p)
    }
}

impl TangentMap for NetworkMap<'_> {
    fn dim(&self) -> usize {
        2 * self.params.n_hidden
    }

    fn apply(&self, state: &DVector<f64>) -> Result<DVector<f64>> {
        let (next, _) = self.step(&LstmState::from_vector(state));
        Ok(next.to_vector())
    }

    fn jacobian(&self, state: &DVector<f64>) -> DMatrix<f64> {
        let s = LstmState::from_vector(state);
        let x = self.feedback_input(&s.h);
        state_jacobian(&self.stack, self.params.variant, x.as_slice(), &s, &self.dz_dh)
    }

    /// Tangent-linear propagation without forming the full Jacobian.
    fn push_forward(&self, state: &DVector<f64>, basis: &DMatrix<f64>) -> DMatrix<f64> {
        let nh = self.params.n_hidden;
        let s = LstmState::from_vector(state);
        let x = self.feedback_input(&s.h);
        let cache = forward_step(&self.stack, self.params.variant, x.as_slice(), &s);
        let coef = CellCoefficients::new(&cache, self.params.variant);
        let dc_in = basis.rows(0, nh);
        let dz = &self.dz_dh * basis.rows(nh, nh);
        let k = basis.ncols();
        let mut out = DMatrix::zeros(2 * nh, k);
        for col in 0..k {
            for j in 0..nh {
                let du = coef.f[j] * dc_in[(j, col)]
                    + coef.du_dzi[j] * dz[(j, col)]
                    + coef.du_dzf[j] * dz[(nh + j, col)]
                    + coef.du_dzg[j] * dz[(3 * nh + j, col)];
                let dc = coef.dc_du[j] * du;
                out[(j, col)] = dc;
                out[(nh + j, col)] = coef.dh_dc[j] * dc + coef.dh_dzo[j] * dz[(2 * nh + j, col)];
            }
        }
        out
    }
}

/// Glorot-uniform weights (`±√(6/(fan_in+fan_out))` per matrix), zero biases,
/// identity normalization. Deterministic in `seed`.
pub fn init_params(
    split: &ObservationSplit,
    n_hidden: usize,
    variant: CellVariant,
    seed: u64,
) -> Result<LstmParams> {
    if n_hidden == 0 {
        return Err(invalid("hidden size must be positive"));
    }
    split.validate(split.n_dim())?;
    let dims = LstmDims {
        n_obs: split.n_obs(),
        n_unmeasured: split.n_unmeasured(),
        n_hidden,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = LstmWeights::zeros(dims);
    let gate_scale = glorot_scale(dims.n_in(), dims.n_hidden);
    let dense_scale = glorot_scale(dims.n_hidden, dims.n_out());
    for m in [
        &mut weights.w_i,
        &mut weights.w_f,
        &mut weights.w_o,
        &mut weights.w_g,
    ] {
        m.iter_mut()
            .for_each(|v| *v = rng.gen_range(-gate_scale..gate_scale));
    }
    weights
        .w_dense
        .iter_mut()
        .for_each(|v| *v = rng.gen_range(-dense_scale..dense_scale));
    Ok(LstmParams {
        weights,
        split: split.clone(),
        n_hidden,
        variant,
        norm_mean: DVector::zeros(dims.n_out()),
        norm_std: DVector::from_element(dims.n_out(), 1.0),
    })
}

pub fn glorot_scale(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Checkpoint text format
// ---------------------------------------------------------------------------

fn checkpoint_arrays(params: &LstmParams) -> Vec<(&'static str, usize, usize, &[f64])> {
    let mut arrays: Vec<_> = params.weights.arrays().to_vec();
    arrays.push(("norm_mean", params.norm_mean.len(), 1, params.norm_mean.as_slice()));
    arrays.push(("norm_std", params.norm_std.len(), 1, params.norm_std.as_slice()));
    arrays
}

fn join_indices(idx: &[usize]) -> String {
    idx.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" ")
}

/// Serializes to the versioned text checkpoint; arrays are row-major.
pub fn checkpoint_to_string(params: &LstmParams) -> String {
    let d = params.dims();
    let mut out = format!(
        "pilstm-checkpoint\nformat {CHECKPOINT_FORMAT_VERSION}\nn_obs {}\nn_unmeasured {}\nn_hidden {}\ncell_variant {}\nobserved {}\nunmeasured {}\n",
        d.n_obs,
        d.n_unmeasured,
        d.n_hidden,
        params.variant,
        join_indices(params.split.observed()),
        join_indices(params.split.unmeasured()),
    );
    for (name, rows, cols, data) in checkpoint_arrays(params) {
        out.push_str(&format!("array {name} {rows} {cols}\n"));
        for r in 0..rows {
            let row: Vec<String> = (0..cols).map(|c| fmt_f64(data[c * rows + r])).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    out.push_str("end\n");
    out
}

pub fn save_checkpoint(params: &LstmParams, path: &Path) -> Result<()> {
    write_atomic(path, checkpoint_to_string(params).as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<LstmParams> {
    parse_checkpoint(&fs::read_to_string(path)?)
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        detail: detail.into(),
    }
}

pub fn parse_checkpoint(text: &str) -> Result<LstmParams> {
    let mut lines = text.lines();
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| format_err(format!("unexpected end of file, expected {what}")))
    };
    if next("magic")? != "pilstm-checkpoint" {
        return Err(format_err("missing `pilstm-checkpoint` magic line"));
    }
    fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' ').or((rest.is_empty()).then_some("")))
            .ok_or_else(|| format_err(format!("expected `{key}`, found `{line}`")))
    }
    fn num<T: FromStr>(s: &str) -> Result<T> {
        s.trim()
            .parse()
            .map_err(|_| format_err(format!("bad number `{s}`")))
    }
    let version: u32 = num(field(next("format")?, "format")?)?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(format_err(format!("unsupported format version {version}")));
    }
    let n_obs: usize = num(field(next("n_obs")?, "n_obs")?)?;
    let n_unmeasured: usize = num(field(next("n_unmeasured")?, "n_unmeasured")?)?;
    let n_hidden: usize = num(field(next("n_hidden")?, "n_hidden")?)?;
    let variant: CellVariant = field(next("cell_variant")?, "cell_variant")?.trim().parse()?;
    let indices = |s: &str| -> Result<Vec<usize>> { s.split_whitespace().map(num).collect() };
    let observed = indices(field(next("observed")?, "observed")?)?;
    let unmeasured = indices(field(next("unmeasured")?, "unmeasured")?)?;
    if observed.len() != n_obs || unmeasured.len() != n_unmeasured {
        return Err(format_err("split indices disagree with declared dims"));
    }
    let split = ObservationSplit::new(observed, unmeasured, n_obs + n_unmeasured)?;
    let dims = LstmDims {
        n_obs,
        n_unmeasured,
        n_hidden,
    };
    let mut params = LstmParams {
        weights: LstmWeights::zeros(dims),
        split,
        n_hidden,
        variant,
        norm_mean: DVector::zeros(dims.n_out()),
        norm_std: DVector::zeros(dims.n_out()),
    };
    let expected: Vec<(&str, usize, usize)> = checkpoint_arrays(&params)
        .iter()
        .map(|a| (a.0, a.1, a.2))
        .collect();
    let mut parsed: Vec<Vec<f64>> = Vec::with_capacity(expected.len());
    for (name, rows, cols) in &expected {
        let header = next("array header")?;
        let want = format!("array {name} {rows} {cols}");
        if header != want {
            return Err(format_err(format!("expected `{want}`, found `{header}`")));
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..*rows {
            let row = next("array row")?;
            let vals: Vec<f64> = row.split_whitespace().map(num).collect::<Result<_>>()?;
            if vals.len() != *cols {
                return Err(format_err(format!("{name} row {r}: expected {cols} values")));
            }
            for (c, v) in vals.into_iter().enumerate() {
                data[c * rows + r] = v;
            }
        }
        parsed.push(data);
    }
    if next("end")? != "end" {
        return Err(format_err("missing `end` line"));
    }
    let mut it = parsed.into_iter();
    for dst in params.weights.arrays_mut() {
        dst.copy_from_slice(&it.next().expect("one entry per array"));
    }
    params.norm_mean.copy_from_slice(&it.next().expect("norm_mean"));
    params.norm_std.copy_from_slice(&it.next().expect("norm_std"));
    params.validate()?;
    Ok(params)
}
