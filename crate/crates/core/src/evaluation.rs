//! Closed-loop statistics and stability of a trained network against the
//! reference system.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ObservationSplit, SystemSpec, Trajectory};
use crate::error::{invalid, Result};
use crate::io::{fmt_f64, write_atomic};
use crate::lyapunov::{LyapunovSpectrum, TangentMap, TangentPropagator};
use crate::network::{self, LstmParams, LstmState, NetworkMap};

/// Histogram density estimate over equal-width bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdfEstimate {
    pub bin_edges: Vec<f64>,
    pub density: Vec<f64>,
    pub sample_count: usize,
}

impl PdfEstimate {
    pub fn bin_width(&self) -> f64 {
        self.bin_edges[1] - self.bin_edges[0]
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        self.bin_edges.windows(2).map(|e| 0.5 * (e[0] + e[1])).collect()
    }

    pub fn integral(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.bin_width()
    }
}

/// Samples outside `range` are clipped into the end bins.
pub fn histogram_pdf(samples: &[f64], n_bins: usize, range: (f64, f64)) -> Result<PdfEstimate> {
    let (lo, hi) = range;
    if samples.is_empty() {
        return Err(invalid("histogram of an empty sample set"));
    }
    if n_bins == 0 || !(lo < hi) {
        return Err(invalid(format!("need n_bins >= 1 and lo < hi, got {n_bins}, ({lo}, {hi})")));
    }
    let width = (hi - lo) / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    for &s in samples {
        let k = ((s - lo) / width).floor();
        let k = if k.is_nan() { 0 } else { (k.max(0.0) as usize).min(n_bins - 1) };
        counts[k] += 1;
    }
    let norm = 1.0 / (samples.len() as f64 * width);
    Ok(PdfEstimate {
        bin_edges: (0..=n_bins).map(|k| lo + k as f64 * width).collect(),
        density: counts.iter().map(|&c| c as f64 * norm).collect(),
        sample_count: samples.len(),
    })
}

/// Exact 1-Wasserstein distance between two empirical distributions,
/// `∫ |F_a(x) − F_b(x)| dx`. For equal sizes this is the mean absolute
/// difference of the sorted samples.
pub fn wasserstein1(samples_a: &[f64], samples_b: &[f64]) -> Result<f64> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(invalid("Wasserstein distance of an empty sample set"));
    }
    let mut a = samples_a.to_vec();
    let mut b = samples_b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        let sum: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        return Ok(sum / a.len() as f64);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut x = a[0].min(b[0]);
    let mut dist = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        dist += (i as f64 / na - j as f64 / nb).abs() * (next - x);
        x = next;
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
    }
    Ok(dist)
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Statistics of one state component: model rollout vs reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableReport {
    /// 0-based component index.
    pub component: usize,
    pub unmeasured: bool,
    pub wasserstein: f64,
    pub reference_std: f64,
    pub model_std: f64,
    /// `Σ |p_model − p_ref| · bin_width` on the shared bins.
    pub histogram_l1: f64,
    pub reference_pdf: PdfEstimate,
    pub model_pdf: PdfEstimate,
}

impl VariableReport {
    pub fn name(&self) -> String {
        format!("y{}", self.component + 1)
    }

    pub fn relative_wasserstein(&self) -> f64 {
        self.wasserstein / self.reference_std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub label: String,
    pub variables: Vec<VariableReport>,
    pub model_spectrum: Option<LyapunovSpectrum>,
    pub reference_spectrum: LyapunovSpectrum,
    pub lambda1_rel_error: Option<f64>,
    pub chaotic: bool,
    pub diverged: bool,
    pub rollout_steps: usize,
    pub rollout_length_in_lyapunov_times: f64,
}

impl ReconstructionReport {
    pub fn unmeasured(&self) -> impl Iterator<Item = &VariableReport> {
        self.variables.iter().filter(|v| v.unmeasured)
    }

    /// Writes `report.json`, `pdf_<var>.csv` per unmeasured variable and `les.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        write_atomic(&dir.join("report.json"), &json)?;
        for v in self.unmeasured() {
            let mut csv = String::from("bin_center,target_density,model_density\n");
            for ((c, t), m) in v
                .reference_pdf
                .bin_centers()
                .iter()
                .zip(&v.reference_pdf.density)
                .zip(&v.model_pdf.density)
            {
                csv.push_str(&format!("{},{},{}\n", fmt_f64(*c), fmt_f64(*t), fmt_f64(*m)));
            }
            write_atomic(&dir.join(format!("pdf_{}.csv", v.name())), csv.as_bytes())?;
        }
        let mut les = String::from("index,reference,model\n");
        for (k, r) in self.reference_spectrum.exponents.iter().enumerate() {
            let m = self
                .model_spectrum
                .as_ref()
                .and_then(|s| s.exponents.get(k))
                .map_or(String::from("nan"), |v| fmt_f64(*v));
            les.push_str(&format!("{},{},{}\n", k + 1, fmt_f64(*r), m));
        }
        write_atomic(&dir.join("les.csv"), les.as_bytes())
    }
}

/// Evaluation protocol knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Closed-loop rollout length in reference Lyapunov times.
    pub rollout_lyap_times: f64,
    /// Open-loop steps on real observations before the rollout.
    pub washout: usize,
    /// `None` extracts as many exponents as the system has components.
    pub n_exponents: Option<usize>,
    pub renorm_interval: usize,
    /// Rollout steps before exponent accumulation starts.
    pub le_warmup: usize,
    pub n_bins: usize,
    /// Skip the network Lyapunov spectrum.
    pub skip_lyapunov: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rollout_lyap_times: 1000.0,
            washout: 100,
            n_exponents: None,
            renorm_interval: 1,
            le_warmup: 10_000,
            n_bins: 100,
            skip_lyapunov: false,
        }
    }
}

impl EvalConfig {
    /// Rollout length in steps for the given reference spectrum.
    pub fn rollout_steps(&self, reference: &LyapunovSpectrum, dt: f64) -> Result<usize> {
        let tau = reference
            .lyapunov_time()
            .ok_or_else(|| invalid("reference spectrum is not chaotic; no Lyapunov time"))?;
        Ok((self.rollout_lyap_times * tau / dt).round() as usize)
    }
}

fn variable_reports(
    model: &[Vec<f64>],
    reference: &Trajectory,
    split: &ObservationSplit,
    n_bins: usize,
) -> Result<Vec<VariableReport>> {
    let mut out = Vec::with_capacity(reference.n_dim());
    for k in 0..reference.n_dim() {
        let target = reference.component(k);
        let lo = target.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = target.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = 0.05 * (hi - lo).max(f64::EPSILON);
        let range = (lo - pad, hi + pad);
        out.push(VariableReport {
            component: k,
            unmeasured: split.unmeasured().contains(&k),
            wasserstein: wasserstein1(&model[k], &target)?,
            reference_std: std_dev(&target),
            model_std: std_dev(&model[k]),
            histogram_l1: 0.0,
            reference_pdf: histogram_pdf(&target, n_bins, range)?,
            model_pdf: histogram_pdf(&model[k], n_bins, range)?,
        });
        let v = out.last_mut().expect("just pushed");
        v.histogram_l1 = v
            .reference_pdf
            .density
            .iter()
            .zip(&v.model_pdf.density)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * v.reference_pdf.bin_width();
    }
    Ok(out)
}

/// Closed-loop rollout of `params` after an open-loop washout on the first
/// `washout` observations of `test`, tracking the tangent dynamics of the
/// network map along the same orbit.
pub fn evaluate_model(
    params: &LstmParams,
    test: &Trajectory,
    spec: &SystemSpec,
    reference: &LyapunovSpectrum,
    config: &EvalConfig,
    label: &str,
) -> Result<ReconstructionReport> {
    params.validate()?;
    if test.n_dim() != spec.n_dim || params.n_dim() != spec.n_dim {
        return Err(invalid(format!(
            "dimension mismatch: test data {}, network {}, system {}",
            test.n_dim(),
            params.n_dim(),
            spec.n_dim
        )));
    }
    if test.len() <= config.washout {
        return Err(invalid("test trajectory is shorter than the washout"));
    }
    let n_steps = config.rollout_steps(reference, spec.dt)?;
    let n_exp = config.n_exponents.unwrap_or(spec.n_dim);

    let inputs: Vec<DVector<f64>> = test.states[..config.washout]
        .iter()
        .map(|y| params.normalize_observed(&params.split.project_observed(y)))
        .collect();
    let mut state = network::washout(params, &inputs, &LstmState::zeros(params.n_hidden))?;

    let map = NetworkMap::new(params)?;
    let track_les = !config.skip_lyapunov && n_steps > config.le_warmup;
    let mut tangent = if track_les {
        Some(TangentPropagator::new(map.dim(), n_exp, config.renorm_interval)?)
    } else {
        None
    };
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(n_steps); spec.n_dim];
    let mut diverged = false;
    for step in 0..n_steps {
        if let Some(t) = tangent.as_mut() {
            if step == config.le_warmup {
                t.start_accumulating()?;
            }
            let pushed = map.push_forward(&state.to_vector(), t.basis());
            if pushed.iter().any(|v| !v.is_finite()) {
                diverged = true;
                break;
            }
            if t.advance_with(pushed).is_err() {
                // collapsed tangent space; statistics are still valid
                tangent = None;
            }
        }
        let (next, pred) = map.step(&state);
        let y = params.prediction_physical(&pred);
        if y.iter().any(|v| !v.is_finite()) {
            diverged = true;
            break;
        }
        for (k, v) in y.iter().enumerate() {
            samples[k].push(*v);
        }
        state = next;
    }

    let variables = if samples[0].is_empty() {
        Vec::new()
    } else {
        variable_reports(&samples, test, &params.split, config.n_bins)?
    };
    let model_spectrum = match tangent {
        Some(t) if !diverged && t.accumulated_steps() > 0 => Some(t.finish(spec.dt, label)?),
        _ => None,
    };
    Ok(finish_report(
        label,
        variables,
        model_spectrum,
        reference,
        diverged,
        samples[0].len(),
        spec.dt,
    ))
}

fn finish_report(
    label: &str,
    variables: Vec<VariableReport>,
    model_spectrum: Option<LyapunovSpectrum>,
    reference: &LyapunovSpectrum,
    diverged: bool,
    rollout_steps: usize,
    dt: f64,
) -> ReconstructionReport {
    let l1_ref = reference.leading();
    let lambda1_rel_error = model_spectrum
        .as_ref()
        .map(|s| (s.leading() - l1_ref).abs() / l1_ref.abs());
    let chaotic = !diverged && model_spectrum.as_ref().is_some_and(|s| s.leading() > 0.0);
    ReconstructionReport {
        label: label.to_string(),
        variables,
        model_spectrum,
        reference_spectrum: reference.clone(),
        lambda1_rel_error,
        chaotic,
        diverged,
        rollout_steps,
        rollout_length_in_lyapunov_times: rollout_steps as f64 * dt * l1_ref,
    }
}

/// Harness check: the reference trajectory evaluated against itself, with the
/// reference spectrum standing in for the model's.
pub fn evaluate_identity(
    test: &Trajectory,
    split: &ObservationSplit,
    reference: &LyapunovSpectrum,
    config: &EvalConfig,
) -> Result<ReconstructionReport> {
    split.validate(test.n_dim())?;
    let samples: Vec<Vec<f64>> = (0..test.n_dim()).map(|k| test.component(k)).collect();
    let variables = variable_reports(&samples, test, split, config.n_bins)?;
    Ok(finish_report(
        "identity",
        variables,
        Some(reference.clone()),
        reference,
        false,
        test.len(),
        test.dt,
    ))
}

/// Side-by-side PDF distances and spectra of several reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub labels: Vec<String>,
    /// `(variable name, W1 per report)` for every unmeasured variable.
    pub pdf_rows: Vec<(String, Vec<f64>)>,
    /// `(index, reference, exponent per report)`; `NaN` where a model has no spectrum.
    pub le_rows: Vec<(usize, f64, Vec<f64>)>,
}

impl Comparison {
    pub fn pdf_csv(&self) -> String {
        let mut out = String::from("variable");
        for l in &self.labels {
            out.push_str(&format!(",{l}"));
        }
        out.push('\n');
        for (name, vals) in &self.pdf_rows {
            out.push_str(name);
            for v in vals {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn le_csv(&self) -> String {
        let mut out = String::from("index,reference");
        for l in &self.labels {
            out.push_str(&format!(",{l}"));
        }
        out.push('\n');
        for (k, r, vals) in &self.le_rows {
            out.push_str(&format!("{k},{}", fmt_f64(*r)));
            for v in vals {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }
}

pub fn compare_runs(reports: &[ReconstructionReport], labels: &[String]) -> Result<Comparison> {
    if reports.len() < 2 || labels.len() != reports.len() {
        return Err(invalid("comparison needs >= 2 reports and one label per report"));
    }
    let first = &reports[0];
    let vars: Vec<usize> = first.unmeasured().map(|v| v.component).collect();
    let n_exp = first.reference_spectrum.exponents.len();
    for r in reports {
        let these: Vec<usize> = r.unmeasured().map(|v| v.component).collect();
        if these != vars && !r.variables.is_empty() {
            return Err(invalid("reports reconstruct different variables"));
        }
        if r.reference_spectrum.exponents.len() != n_exp
            || r.model_spectrum.as_ref().is_some_and(|s| s.exponents.len() != n_exp)
        {
            return Err(invalid("spectra lengths differ between reports"));
        }
    }
    let pdf_rows = vars
        .iter()
        .map(|&k| {
            let vals = reports
                .iter()
                .map(|r| {
                    r.variables
                        .iter()
                        .find(|v| v.component == k)
                        .map_or(f64::NAN, |v| v.wasserstein)
                })
                .collect();
            (format!("y{}", k + 1), vals)
        })
        .collect();
    let le_rows = (0..n_exp)
        .map(|j| {
            let vals = reports
                .iter()
                .map(|r| r.model_spectrum.as_ref().map_or(f64::NAN, |s| s.exponents[j]))
                .collect();
            (j + 1, first.reference_spectrum.exponents[j], vals)
        })
        .collect();
    Ok(Comparison {
        labels: labels.to_vec(),
        pdf_rows,
        le_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn histogram_examples() {
        let pdf = histogram_pdf(&[2.0; 7], 1, (1.0, 3.0)).unwrap();
        assert_eq!(pdf.density, vec![0.5]);
        let grid: Vec<f64> = (0..1000).map(|k| (k as f64 + 0.5) / 1000.0).collect();
        let flat = histogram_pdf(&grid, 10, (0.0, 1.0)).unwrap();
        for d in &flat.density {
            assert!((d - 1.0).abs() <= 1.0 / 1000.0 * 10.0);
        }
        let clipped = histogram_pdf(&[-5.0, 0.5, 9.0], 4, (0.0, 1.0)).unwrap();
        assert_relative_eq!(clipped.integral(), 1.0, epsilon = 1e-12);
        assert!(histogram_pdf(&[], 3, (0.0, 1.0)).is_err());
        assert!(histogram_pdf(&[1.0], 3, (1.0, 1.0)).is_err());
    }

    #[test]
    fn wasserstein_examples() {
        let a = [0.3, -1.0, 2.5, 0.0];
        assert_eq!(wasserstein1(&a, &a).unwrap(), 0.0);
        let shifted: Vec<f64> = a.iter().map(|v| v + 0.75).collect();
        assert_relative_eq!(wasserstein1(&a, &shifted).unwrap(), 0.75, epsilon = 1e-15);
        assert_eq!(wasserstein1(&[0.0, 1.0], &[0.0, 0.0]).unwrap(), 0.5);
        assert!(wasserstein1(&[], &a).is_err());
    }

    #[test]
    fn wasserstein_unequal_sizes() {
        // uniform on {0,1} vs point mass at 0.5: |F_a - F_b| = 1/2 on [0, 1]
        assert_relative_eq!(wasserstein1(&[0.0, 1.0], &[0.5]).unwrap(), 0.5, epsilon = 1e-15);
        // repeated samples behave like weighted atoms
        let w = wasserstein1(&[0.0, 0.0, 1.0], &[0.0, 1.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        assert_relative_eq!(w, 1.0 / 3.0, epsilon = 1e-15);
    }
}
