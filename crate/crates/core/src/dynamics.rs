//! Autonomous ODE contract, the Lorenz-96 system and Euler trajectory generation.
//!
//! Components are 0-based internally. The cyclic neighbours `y_{i-2}`, `y_{i-1}`
//! and `y_{i+1}` of component `i` are taken modulo `N`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::{fmt_f64, write_atomic};

/// Full physical state `y(t)`.
pub type StateVector = DVector<f64>;

/// Smallest dimension for which the four cyclic neighbours are distinct.
pub const MIN_DIM: usize = 4;

/// Dimension, forcing and time step of a Lorenz-96 configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub n_dim: usize,
    pub forcing: f64,
    pub dt: f64,
}

impl Default for SystemSpec {
    fn default() -> Self {
        Self {
            n_dim: 10,
            forcing: 8.0,
            dt: 0.01,
        }
    }
}

impl SystemSpec {
    pub fn new(n_dim: usize, forcing: f64, dt: f64) -> Result<Self> {
        let spec = Self { n_dim, forcing, dt };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_dim < MIN_DIM {
            return Err(invalid(format!(
                "Lorenz-96 needs at least {MIN_DIM} components, got {}",
                self.n_dim
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid(format!("time step must be positive, got {}", self.dt)));
        }
        if !self.forcing.is_finite() {
            return Err(invalid("forcing must be finite"));
        }
        Ok(())
    }

    /// The homogeneous equilibrium `F·(1,…,1)`.
    pub fn equilibrium(&self) -> StateVector {
        DVector::from_element(self.n_dim, self.forcing)
    }

    /// Default starting point: the equilibrium with component 0 nudged by 0.01.
    pub fn default_initial_condition(&self) -> StateVector {
        let mut y = self.equilibrium();
        y[0] += 0.01;
        y
    }
}

fn check_dim(n: usize) -> Result<()> {
    if n < MIN_DIM {
        Err(invalid(format!(
            "Lorenz-96 needs at least {MIN_DIM} components, got {n}"
        )))
    } else {
        Ok(())
    }
}

#[inline]
fn neighbours(i: usize, n: usize) -> (usize, usize, usize) {
    ((i + n - 2) % n, (i + n - 1) % n, (i + 1) % n)
}

/// Right-hand side `f(y)` of the Lorenz-96 system.
pub fn lorenz96_rhs(y: &StateVector, forcing: f64) -> Result<StateVector> {
    check_dim(y.len())?;
    let mut out = DVector::zeros(y.len());
    rhs_into(y.as_slice(), forcing, out.as_mut_slice());
    Ok(out)
}

/// Unchecked slice form of [`lorenz96_rhs`]; `y.len() >= 4` is the caller's job.
pub(crate) fn rhs_into(y: &[f64], forcing: f64, out: &mut [f64]) {
    let n = y.len();
    for i in 0..n {
        let (m2, m1, p1) = neighbours(i, n);
        out[i] = (y[p1] - y[m2]) * y[m1] - y[i] + forcing;
    }
}

/// Analytic Jacobian `∂f_i/∂y_j` of the Lorenz-96 right-hand side.
pub fn lorenz96_jacobian(y: &StateVector, _forcing: f64) -> Result<DMatrix<f64>> {
    let n = y.len();
    check_dim(n)?;
    let mut jac = DMatrix::zeros(n, n);
    for i in 0..n {
        let (m2, m1, p1) = neighbours(i, n);
        jac[(i, i)] = -1.0;
        jac[(i, p1)] += y[m1];
        jac[(i, m1)] += y[p1] - y[m2];
        jac[(i, m2)] += -y[m1];
    }
    Ok(jac)
}

/// Transposed Jacobian-vector product `J(y)ᵀ v`, accumulated into `out`.
pub(crate) fn jacobian_transpose_apply(y: &[f64], v: &[f64], out: &mut [f64]) {
    let n = y.len();
    for i in 0..n {
        let (m2, m1, p1) = neighbours(i, n);
        let vi = v[i];
        out[i] -= vi;
        out[p1] += y[m1] * vi;
        out[m1] += (y[p1] - y[m2]) * vi;
        out[m2] -= y[m1] * vi;
    }
}

/// One explicit Euler step `y + Δt·f(y)`.
pub fn euler_step(y: &StateVector, spec: &SystemSpec) -> Result<StateVector> {
    if y.len() != spec.n_dim {
        return Err(invalid(format!(
            "state has {} components but the system has {}",
            y.len(),
            spec.n_dim
        )));
    }
    let f = lorenz96_rhs(y, spec.forcing)?;
    Ok(y + spec.dt * f)
}

/// Time-indexed sequence of full states with a uniform step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<StateVector>,
    pub dt: f64,
    pub t0: f64,
}

impl Trajectory {
    pub fn new(states: Vec<StateVector>, dt: f64, t0: f64) -> Result<Self> {
        let traj = Self { states, dt, t0 };
        traj.validate()?;
        Ok(traj)
    }

    fn validate(&self) -> Result<()> {
        let Some(first) = self.states.first() else {
            return Err(invalid("trajectory has no states"));
        };
        let n = first.len();
        if let Some(k) = self.states.iter().position(|s| s.len() != n) {
            return Err(invalid(format!(
                "state {k} has {} components, expected {n}",
                self.states[k].len()
            )));
        }
        if !(self.dt > 0.0) {
            return Err(invalid("trajectory time step must be positive"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn n_dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    /// Values of one component over time.
    pub fn component(&self, j: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[j]).collect()
    }

    /// Sub-trajectory `[start, end)` with its time origin shifted accordingly.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(invalid(format!(
                "slice {start}..{end} out of range for {} states",
                self.len()
            )));
        }
        Ok(Self {
            states: self.states[start..end].to_vec(),
            dt: self.dt,
            t0: self.time(start),
        })
    }

    /// Writes `t,y1,...,yN` rows with 17 significant digits.
    pub fn to_csv_string(&self) -> String {
        let n = self.n_dim();
        let mut out = String::with_capacity(self.len() * (n + 1) * 24);
        out.push('t');
        for j in 1..=n {
            out.push_str(&format!(",y{j}"));
        }
        out.push('\n');
        for (i, s) in self.states.iter().enumerate() {
            out.push_str(&fmt_f64(self.time(i)));
            for v in s.iter() {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv_string().as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.get(0) != Some("t") || headers.len() < 2 {
            return Err(Error::Format {
                kind: "trajectory",
                detail: format!("{}: header must be t,y1,...,yN", path.display()),
            });
        }
        let n = headers.len() - 1;
        let mut times = Vec::new();
        let mut states = Vec::new();
        for record in reader.records() {
            let record = record?;
            let row = times.len() + 1;
            let parse = |k: usize| -> Result<f64> {
                record[k].trim().parse::<f64>().map_err(|e| Error::Format {
                    kind: "trajectory",
                    detail: format!("row {row}: {e}"),
                })
            };
            times.push(parse(0)?);
            let mut s = DVector::zeros(n);
            for j in 0..n {
                s[j] = parse(j + 1)?;
            }
            states.push(s);
        }
        if states.is_empty() {
            return Err(Error::Format {
                kind: "trajectory",
                detail: format!("{}: no rows", path.display()),
            });
        }
        let t0 = times[0];
        let dt = match TrajectoryMeta::read(&meta_path(path)) {
            Ok(meta) => meta.dt,
            Err(_) if times.len() >= 2 => times[1] - times[0],
            Err(e) => return Err(e),
        };
        Self::new(states, dt, t0)
    }
}

/// Sidecar metadata written next to every trajectory CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub n_dim: usize,
    pub forcing: f64,
    pub dt: f64,
    pub n_washout: usize,
    pub n_steps: usize,
    pub seed: Option<u64>,
    pub t0: f64,
}

impl TrajectoryMeta {
    pub fn spec(&self) -> SystemSpec {
        SystemSpec {
            n_dim: self.n_dim,
            forcing: self.forcing,
            dt: self.dt,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut body = serde_json::to_vec_pretty(self)?;
        body.write_all(b"\n")?;
        write_atomic(path, &body)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// `data/train.csv` → `data/train.json`.
pub fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Integrates `n_washout + n_steps` Euler steps from `y0` and keeps the last
/// `n_steps + 1` states. With `seed = Some(s)` every component of `y0` is first
/// perturbed by a uniform draw in `[-0.01, 0.01)` from a ChaCha8 stream.
pub fn generate_trajectory(
    spec: &SystemSpec,
    y0: &StateVector,
    n_washout: usize,
    n_steps: usize,
    seed: Option<u64>,
) -> Result<Trajectory> {
    spec.validate()?;
    if n_steps < 1 {
        return Err(invalid("n_steps must be at least 1"));
    }
    if y0.len() != spec.n_dim {
        return Err(invalid(format!(
            "initial state has {} components, system has {}",
            y0.len(),
            spec.n_dim
        )));
    }
    let mut y = y0.clone();
    if let Some(seed) = seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in y.iter_mut() {
            *v += rng.gen_range(-0.01..0.01);
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { step: 0 });
    }
    for step in 1..=n_washout {
        y = euler_step(&y, spec)?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step });
        }
    }
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(y);
    for k in 1..=n_steps {
        let next = euler_step(&states[k - 1], spec)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: n_washout + k,
            });
        }
        states.push(next);
    }
    Ok(Trajectory {
        states,
        dt: spec.dt,
        t0: 0.0,
    })
}

/// Partition of state components into observed `x` and unmeasured `ξ`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationSplit {
    observed: Vec<usize>,
    unmeasured: Vec<usize>,
}

impl ObservationSplit {
    pub fn new(observed: Vec<usize>, unmeasured: Vec<usize>, n_dim: usize) -> Result<Self> {
        let split = Self {
            observed,
            unmeasured,
        };
        split.validate(n_dim)?;
        Ok(split)
    }

    /// Observe the first `n_dim - n_unmeasured` components, hide the rest.
    pub fn tail(n_dim: usize, n_unmeasured: usize) -> Result<Self> {
        if n_unmeasured >= n_dim {
            return Err(invalid(format!(
                "cannot hide {n_unmeasured} of {n_dim} components; at least one must be observed"
            )));
        }
        let n_obs = n_dim - n_unmeasured;
        Self::new((0..n_obs).collect(), (n_obs..n_dim).collect(), n_dim)
    }

    pub fn full(n_dim: usize) -> Self {
        Self {
            observed: (0..n_dim).collect(),
            unmeasured: Vec::new(),
        }
    }

    pub fn validate(&self, n_dim: usize) -> Result<()> {
        let sorted = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if !sorted(&self.observed) || !sorted(&self.unmeasured) {
            return Err(invalid("split indices must be strictly ascending"));
        }
        if self.observed.is_empty() {
            return Err(invalid("at least one component must be observed"));
        }
        let mut seen = vec![false; n_dim];
        for &k in self.observed.iter().chain(&self.unmeasured) {
            if k >= n_dim {
                return Err(invalid(format!(
                    "index {k} out of range for dimension {n_dim}"
                )));
            }
            if seen[k] {
                return Err(invalid(format!("index {k} is both observed and unmeasured")));
            }
            seen[k] = true;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(invalid(format!("component {k} is neither observed nor unmeasured")));
        }
        Ok(())
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn unmeasured(&self) -> &[usize] {
        &self.unmeasured
    }

    pub fn n_obs(&self) -> usize {
        self.observed.len()
    }

    pub fn n_unmeasured(&self) -> usize {
        self.unmeasured.len()
    }

    pub fn n_dim(&self) -> usize {
        self.observed.len() + self.unmeasured.len()
    }

    /// Component indices in network output order: observed, then unmeasured.
    pub fn output_order(&self) -> impl Iterator<Item = usize> + '_ {
        self.observed.iter().chain(&self.unmeasured).copied()
    }

    pub fn project_observed(&self, y: &StateVector) -> DVector<f64> {
        DVector::from_iterator(self.observed.len(), self.observed.iter().map(|&k| y[k]))
    }

    pub fn project_unmeasured(&self, y: &StateVector) -> DVector<f64> {
        DVector::from_iterator(self.unmeasured.len(), self.unmeasured.iter().map(|&k| y[k]))
    }

    /// Inverse of the projections: writes `x` and `ξ` back into component order.
    pub fn merge(&self, x: &DVector<f64>, xi: &DVector<f64>) -> StateVector {
        let mut y = DVector::zeros(self.n_dim());
        for (v, &k) in x.iter().zip(&self.observed) {
            y[k] = *v;
        }
        for (v, &k) in xi.iter().zip(&self.unmeasured) {
            y[k] = *v;
        }
        y
    }
}

/// Column projection of a trajectory onto `(x, ξ)`.
pub fn split_observations(
    traj: &Trajectory,
    split: &ObservationSplit,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    split.validate(traj.n_dim())?;
    let observed = traj.states.iter().map(|s| split.project_observed(s)).collect();
    let unmeasured = traj
        .states
        .iter()
        .map(|s| split.project_unmeasured(s))
        .collect();
    Ok((observed, unmeasured))
}

/// Reassembles full states from the two halves produced by [`split_observations`].
pub fn merge_observations(
    observed: &[DVector<f64>],
    unmeasured: &[DVector<f64>],
    split: &ObservationSplit,
) -> Result<Vec<StateVector>> {
    if observed.len() != unmeasured.len() {
        return Err(invalid("observed and unmeasured sequences differ in length"));
    }
    Ok(observed
        .iter()
        .zip(unmeasured)
        .map(|(x, xi)| split.merge(x, xi))
        .collect())
}
