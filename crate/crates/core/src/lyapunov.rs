//! Lyapunov spectra of discrete-time maps by tangent propagation with
//! periodic QR re-orthonormalization (Benettin's algorithm).
//!
//! Exponents are always reported in continuous-time units: the accumulated
//! log-stretches are divided by `n_steps * dt`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, SystemSpec};
use crate::error::{invalid, Error, Result};
use crate::io::{fmt_f64, write_atomic};

/// Below this a diagonal entry of `R` is treated as a collapsed direction.
pub const DEGENERATE_TOL: f64 = 1e-300;

/// Thin QR by modified Gram-Schmidt, with `R_jj > 0`.
///
/// `a` is `m × k` with `k ≤ m`; returns `Q` (`m × k`, orthonormal columns)
/// and upper-triangular `R` (`k × k`).
pub fn qr_positive(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (m, k) = a.shape();
    if k > m {
        return Err(invalid(format!("QR needs k <= m, got {m}x{k}")));
    }
    let mut q = a.clone();
    let mut r = DMatrix::zeros(k, k);
    for j in 0..k {
        let norm = q.column(j).norm();
        if !(norm >= DEGENERATE_TOL) {
            return Err(Error::DegenerateTangent {
                column: j,
                magnitude: norm,
            });
        }
        r[(j, j)] = norm;
        q.column_mut(j).unscale_mut(norm);
        for l in (j + 1)..k {
            let proj = q.column(j).dot(&q.column(l));
            r[(j, l)] = proj;
            let qj = q.column(j).clone_owned();
            q.column_mut(l).axpy(-proj, &qj, 1.0);
        }
    }
    Ok((q, r))
}

/// A discrete map `s ↦ g(s)` together with its Jacobian.
pub trait TangentMap {
    fn dim(&self) -> usize;

    fn apply(&self, state: &DVector<f64>) -> Result<DVector<f64>>;

    fn jacobian(&self, state: &DVector<f64>) -> DMatrix<f64>;

    /// `J(state) · basis`. Override when the Jacobian has exploitable structure.
    fn push_forward(&self, state: &DVector<f64>, basis: &DMatrix<f64>) -> DMatrix<f64> {
        self.jacobian(state) * basis
    }
}

/// Constant linear map `s ↦ A s`.
#[derive(Debug, Clone)]
pub struct LinearMap(pub DMatrix<f64>);

impl LinearMap {
    pub fn diagonal(entries: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(entries)))
    }
}

impl TangentMap for LinearMap {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, state: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.0 * state)
    }

    fn jacobian(&self, _state: &DVector<f64>) -> DMatrix<f64> {
        self.0.clone()
    }
}

/// Euler-discretized Lorenz-96: `y ↦ y + Δt f(y)`, Jacobian `I + Δt J(y)`.
#[derive(Debug, Clone, Copy)]
pub struct EulerOdeMap {
    pub spec: SystemSpec,
}

pub fn ode_tangent_map(spec: SystemSpec) -> EulerOdeMap {
    EulerOdeMap { spec }
}

impl TangentMap for EulerOdeMap {
    fn dim(&self) -> usize {
        self.spec.n_dim
    }

    fn apply(&self, state: &DVector<f64>) -> Result<DVector<f64>> {
        dynamics::euler_step(state, &self.spec)
    }

    fn jacobian(&self, state: &DVector<f64>) -> DMatrix<f64> {
        let n = self.spec.n_dim;
        let jac = dynamics::lorenz96_jacobian(state, self.spec.forcing)
            .expect("EulerOdeMap is only built from a validated spec");
        DMatrix::identity(n, n) + jac * self.spec.dt
    }
}

/// Sorted exponents plus the parameters of the run that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSpectrum {
    pub exponents: Vec<f64>,
    pub n_steps: usize,
    pub dt: f64,
    pub renorm_interval: usize,
    pub source_label: String,
}

impl LyapunovSpectrum {
    pub fn leading(&self) -> f64 {
        self.exponents[0]
    }

    /// `1/λ1`, defined only for a positive leading exponent.
    pub fn lyapunov_time(&self) -> Option<f64> {
        let l1 = *self.exponents.first()?;
        (l1 > 0.0).then(|| 1.0 / l1)
    }

    pub fn n_positive(&self) -> usize {
        self.exponents.iter().filter(|&&l| l > 0.0).count()
    }

    pub fn sum(&self) -> f64 {
        self.exponents.iter().sum()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("index,exponent\n");
        for (i, l) in self.exponents.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, fmt_f64(*l)));
        }
        out
    }

    /// Writes `index,exponent` rows to `path` and the run parameters to the
    /// `.json` sidecar next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv_string().as_bytes())?;
        let mut meta = serde_json::to_vec_pretty(self)?;
        meta.push(b'\n');
        write_atomic(&path.with_extension("json"), &meta)
    }

    /// Reads a spectrum back from the `.json` sidecar of `path`.
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)?)
    }
}

/// Parameters of a Benettin run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenettinConfig {
    pub n_exponents: usize,
    /// Map steps over which log-stretches are accumulated.
    pub n_steps: usize,
    pub renorm_interval: usize,
    /// Map steps run before accumulation so the basis aligns with the
    /// dominant tangent directions.
    pub warmup: usize,
    pub dt: f64,
}

impl BenettinConfig {
    /// Defaults for the Lorenz-96 reference run.
    pub fn reference(spec: &SystemSpec) -> Self {
        Self {
            n_exponents: spec.n_dim,
            n_steps: 500_000,
            renorm_interval: 10,
            warmup: 10_000,
            dt: spec.dt,
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.n_exponents == 0 || self.n_exponents > dim {
            return Err(invalid(format!(
                "cannot extract {} exponents from a {dim}-dimensional map",
                self.n_exponents
            )));
        }
        if self.n_steps == 0 || self.renorm_interval == 0 {
            return Err(invalid("n_steps and renorm_interval must be positive"));
        }
        if !(self.dt > 0.0) {
            return Err(invalid("dt must be positive"));
        }
        Ok(())
    }
}

/// Orthonormal tangent basis advanced one Jacobian at a time.
///
/// Used directly when the base trajectory is produced elsewhere (e.g. a
/// network rollout that also collects statistics), and by
/// [`benettin_spectrum`] otherwise.
#[derive(Debug, Clone)]
pub struct TangentPropagator {
    basis: DMatrix<f64>,
    log_sums: Vec<f64>,
    renorm_interval: usize,
    since_renorm: usize,
    accumulated_steps: usize,
    accumulating: bool,
}

impl TangentPropagator {
    /// Starts from the first `n_exponents` canonical unit vectors.
    pub fn new(dim: usize, n_exponents: usize, renorm_interval: usize) -> Result<Self> {
        if n_exponents == 0 || n_exponents > dim {
            return Err(invalid(format!(
                "cannot track {n_exponents} tangent directions in dimension {dim}"
            )));
        }
        Self::with_basis(DMatrix::identity(dim, n_exponents), renorm_interval)
    }

    /// Starts from the orthonormalized columns of `basis`.
    pub fn with_basis(basis: DMatrix<f64>, renorm_interval: usize) -> Result<Self> {
        if renorm_interval == 0 {
            return Err(invalid("renorm_interval must be positive"));
        }
        let (q, _) = qr_positive(&basis)?;
        Ok(Self {
            log_sums: vec![0.0; q.ncols()],
            basis: q,
            renorm_interval,
            since_renorm: 0,
            accumulated_steps: 0,
            accumulating: false,
        })
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn accumulated_steps(&self) -> usize {
        self.accumulated_steps
    }

    /// Ends the warm-up: re-orthonormalizes and starts counting stretches.
    pub fn start_accumulating(&mut self) -> Result<()> {
        self.renormalize_discarding()?;
        self.accumulating = true;
        Ok(())
    }

    /// Advances the basis by one step with the pushed-forward basis `J · Q`.
    pub fn advance_with(&mut self, pushed: DMatrix<f64>) -> Result<()> {
        self.basis = pushed;
        self.since_renorm += 1;
        if self.accumulating {
            self.accumulated_steps += 1;
        }
        if self.since_renorm == self.renorm_interval {
            self.renormalize()?;
        }
        Ok(())
    }

    pub fn advance(&mut self, jacobian: &DMatrix<f64>) -> Result<()> {
        let pushed = jacobian * &self.basis;
        self.advance_with(pushed)
    }

    fn renormalize(&mut self) -> Result<()> {
        let (q, r) = qr_positive(&self.basis)?;
        if self.accumulating {
            for (j, sum) in self.log_sums.iter_mut().enumerate() {
                *sum += r[(j, j)].ln();
            }
        }
        self.basis = q;
        self.since_renorm = 0;
        Ok(())
    }

    fn renormalize_discarding(&mut self) -> Result<()> {
        let (q, _) = qr_positive(&self.basis)?;
        self.basis = q;
        self.since_renorm = 0;
        Ok(())
    }

    /// Flushes any partial interval and converts log-sums to exponents.
    pub fn finish(mut self, dt: f64, source_label: impl Into<String>) -> Result<LyapunovSpectrum> {
        if self.since_renorm > 0 {
            self.renormalize()?;
        }
        if self.accumulated_steps == 0 {
            return Err(invalid("no steps were accumulated"));
        }
        let horizon = self.accumulated_steps as f64 * dt;
        let mut exponents: Vec<f64> = self.log_sums.iter().map(|s| s / horizon).collect();
        exponents.sort_by(|a, b| b.total_cmp(a));
        Ok(LyapunovSpectrum {
            exponents,
            n_steps: self.accumulated_steps,
            dt,
            renorm_interval: self.renorm_interval,
            source_label: source_label.into(),
        })
    }
}

/// Lyapunov spectrum of `map` along the orbit of `s0`.
pub fn benettin_spectrum<M: TangentMap + ?Sized>(
    map: &M,
    s0: &DVector<f64>,
    config: &BenettinConfig,
    source_label: &str,
) -> Result<LyapunovSpectrum> {
    config.validate(map.dim())?;
    let basis = DMatrix::identity(map.dim(), config.n_exponents);
    benettin_spectrum_from_basis(map, s0, basis, config, source_label)
}

/// As [`benettin_spectrum`], starting from the orthonormalized columns of `basis`.
pub fn benettin_spectrum_from_basis<M: TangentMap + ?Sized>(
    map: &M,
    s0: &DVector<f64>,
    basis: DMatrix<f64>,
    config: &BenettinConfig,
    source_label: &str,
) -> Result<LyapunovSpectrum> {
    config.validate(map.dim())?;
    if s0.len() != map.dim() || basis.nrows() != map.dim() {
        return Err(invalid("initial state or basis does not match the map dimension"));
    }
    let mut tangent = TangentPropagator::with_basis(basis, config.renorm_interval)?;
    let mut state = s0.clone();
    for step in 0..config.warmup + config.n_steps {
        if step == config.warmup {
            tangent.start_accumulating()?;
        }
        let pushed = map.push_forward(&state, tangent.basis());
        state = map.apply(&state)?;
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: step + 1 });
        }
        tangent.advance_with(pushed)?;
    }
    tangent.finish(config.dt, source_label)
}

/// Reference spectrum of the Euler-discretized Lorenz-96 system, started from
/// the spec's default initial condition.
pub fn reference_spectrum(spec: &SystemSpec, config: &BenettinConfig) -> Result<LyapunovSpectrum> {
    spec.validate()?;
    benettin_spectrum(
        &ode_tangent_map(*spec),
        &spec.default_initial_condition(),
        config,
        "lorenz96-euler",
    )
}
