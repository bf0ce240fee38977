//! The `pilstm` command line: `generate | train | sweep | lyapunov | evaluate`.
//!
//! Every command takes `--config <file.json>` (a [`RunConfig`], or a
//! [`RunManifest`] from an earlier run) plus field-level overrides, and writes
//! a manifest next to its outputs. All randomness derives from the root
//! `seed` through the fixed offsets in [`seed_offset`].

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dynamics::{self, ObservationSplit, SystemSpec, Trajectory, TrajectoryMeta};
use crate::error::{invalid, Error, Result};
use crate::evaluation::{self, EvalConfig};
use crate::io::{file_digest, write_atomic};
use crate::lyapunov::{self, BenettinConfig, LinearMap, LyapunovSpectrum, TangentMap};
use crate::network::{self, CellVariant, LstmParams, LstmState, NetworkMap};
use crate::training::{self, DataLossUnits, SweepGrid, TrainConfig, TrainingSet};

/// Default output directory when `--out` is not given.
pub const OUT_DIR_ENV: &str = "PILSTM_OUT";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Offsets from the root seed for each stage.
pub mod seed_offset {
    pub const TRAIN_DATA: u64 = 0;
    pub const TEST_DATA: u64 = 1;
    /// Training (and sweep trial `k`, at `TRAINING + k`).
    pub const TRAINING: u64 = 100;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DataRole {
    #[default]
    Train,
    Test,
}

impl DataRole {
    fn name(self) -> &'static str {
        match self {
            DataRole::Train => "train",
            DataRole::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Contiguous tail of unmeasured components, used when no explicit lists are given.
    pub n_unmeasured: usize,
    pub observed: Option<Vec<usize>>,
    pub unmeasured: Option<Vec<usize>>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n_unmeasured: 1,
            observed: None,
            unmeasured: None,
        }
    }
}

impl SplitConfig {
    pub fn resolve(&self, n_dim: usize) -> Result<ObservationSplit> {
        match (&self.observed, &self.unmeasured) {
            (Some(o), Some(u)) => ObservationSplit::new(o.clone(), u.clone(), n_dim),
            (None, None) => ObservationSplit::tail(n_dim, self.n_unmeasured),
            _ => Err(invalid("split needs both `observed` and `unmeasured`, or neither")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub n_steps: usize,
    pub n_washout: usize,
    pub role: DataRole,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n_steps: 20_000,
            n_washout: 1_000,
            role: DataRole::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LyapunovConfig {
    pub checkpoint: Option<PathBuf>,
    /// Linear test map, e.g. `diag:2,0.5`.
    pub map: Option<String>,
    pub n_exponents: Option<usize>,
    pub n_steps: usize,
    pub warmup: usize,
    /// Defaults to 10 for the ODE and 1 for maps and networks.
    pub renorm_interval: Option<usize>,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            map: None,
            n_exponents: None,
            n_steps: 500_000,
            warmup: 10_000,
            renorm_interval: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct EvaluateConfig {
    pub checkpoints: Vec<PathBuf>,
    pub labels: Vec<String>,
    /// Evaluate the test trajectory against itself.
    pub identity: bool,
    /// Spectrum file from `pilstm lyapunov`; computed on the fly when absent.
    pub reference_spectrum: Option<PathBuf>,
    pub eval: EvalConfig,
}

/// Everything a command needs; unknown sections are ignored by commands that
/// don't use them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Applied once during resolution, then cleared.
    pub preset: Option<String>,
    /// Taken from the dataset or checkpoint when absent.
    pub system: Option<SystemSpec>,
    pub split: SplitConfig,
    pub generate: GenerateConfig,
    pub dataset: Option<PathBuf>,
    pub test_dataset: Option<PathBuf>,
    pub train: TrainConfig,
    pub sweep: SweepGrid,
    pub lyapunov: LyapunovConfig,
    pub evaluate: EvaluateConfig,
}

impl RunConfig {
    /// Accepts either a bare config or a manifest (whose `config` is used).
    pub fn load(path: &Path) -> Result<Self> {
        let value: Value = serde_json::from_slice(&fs::read(path)?)?;
        let inner = match value.get("config") {
            Some(c) if value.get("command").is_some() => c.clone(),
            _ => value,
        };
        Ok(serde_json::from_value(inner)?)
    }
}

/// Provenance record written at the end of every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub preset: Option<String>,
    pub config: RunConfig,
    /// Input path → sha256 hex digest.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
    pub tool_version: String,
    pub wall_clock_seconds: f64,
}

#[derive(Parser, Debug)]
#[command(name = "pilstm", version, about = "Physics-informed LSTM state reconstruction for Lorenz-96")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Integrate Lorenz-96 and write a trajectory CSV.
    Generate(GenerateArgs),
    /// Train one network on a dataset.
    Train(TrainArgs),
    /// Train over the (N_h, alpha_pi) grid, resuming finished trials.
    Sweep(TrainArgs),
    /// Lyapunov spectrum of the reference system, a checkpoint, or a test map.
    Lyapunov(LyapunovArgs),
    /// Closed-loop statistics and spectra of one or more checkpoints.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// JSON config, or a manifest from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory [default: $PILSTM_OUT, else `runs`].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// case-i, case-ii or case-iii.
    #[arg(long)]
    pub preset: Option<String>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
    /// Print a machine-readable summary to stdout.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub washout: Option<usize>,
    #[arg(long, value_enum)]
    pub role: Option<DataRole>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Training trajectory CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub alpha_pi: Option<f64>,
    #[arg(long = "n-h")]
    pub n_hidden: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub cell_variant: Option<CellVariant>,
    /// Scale of the data loss: `normalized` or `physical`.
    #[arg(long)]
    pub dd_units: Option<DataLossUnits>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct LyapunovArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Linear test map, e.g. `diag:2,0.5`.
    #[arg(long)]
    pub map: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Observations used to wash out the network state before the run.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Repeat to compare several models.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    /// One label per checkpoint.
    #[arg(long)]
    pub label: Vec<String>,
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// Reference spectrum CSV written by `pilstm lyapunov`.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Self-comparison of the test data (harness check).
    #[arg(long)]
    pub identity: bool,
    #[arg(long)]
    pub rollout_lyap_times: Option<f64>,
}

/// Result of a command: its manifest plus command-specific summary values.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub manifest: RunManifest,
    pub summary: Value,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let json_out = match &cli.command {
        Command::Generate(a) => a.common.json,
        Command::Train(a) | Command::Sweep(a) => a.common.json,
        Command::Lyapunov(a) => a.common.json,
        Command::Evaluate(a) => a.common.json,
    };
    match run(&cli.command) {
        Ok(outcome) => {
            if json_out {
                let v = json!({ "manifest": outcome.manifest, "summary": outcome.summary });
                println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(command: &Command) -> Result<Outcome> {
    let start = Instant::now();
    let (name, common, mut outcome) = match command {
        Command::Generate(a) => ("generate", &a.common, cmd_generate(a)?),
        Command::Train(a) => ("train", &a.common, cmd_train(a)?),
        Command::Sweep(a) => ("sweep", &a.common, cmd_sweep(a)?),
        Command::Lyapunov(a) => ("lyapunov", &a.common, cmd_lyapunov(a)?),
        Command::Evaluate(a) => ("evaluate", &a.common, cmd_evaluate(a)?),
    };
    outcome.manifest.command = name.to_string();
    outcome.manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
    let mut body = serde_json::to_vec_pretty(&outcome.manifest)?;
    body.push(b'\n');
    let manifest_name = match command {
        Command::Generate(_) => format!("generate_{}_manifest.json", outcome.manifest.config.generate.role.name()),
        _ => format!("{name}_manifest.json"),
    };
    write_atomic(&out_dir(common).join(manifest_name), &body)?;
    Ok(outcome)
}

fn out_dir(common: &CommonArgs) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// File config → preset → flags; derived seeds are filled in.
fn resolve_config(common: &CommonArgs) -> Result<(RunConfig, Option<String>)> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let preset_name = common.preset.clone().or(config.preset.take());
    if let Some(name) = &preset_name {
        let p = training::preset(name)?;
        config.split = SplitConfig {
            n_unmeasured: p.n_unmeasured,
            observed: None,
            unmeasured: None,
        };
        p.apply(&mut config.train);
    }
    config.train.seed = config.seed.wrapping_add(seed_offset::TRAINING);
    Ok((config, preset_name))
}

fn refuse_existing(paths: &[&Path], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(Error::OutputExists(p.to_path_buf())),
        None => Ok(()),
    }
}

fn manifest(config: RunConfig, preset: Option<String>, inputs: BTreeMap<String, String>, outputs: Vec<PathBuf>) -> RunManifest {
    RunManifest {
        command: String::new(),
        preset,
        seed: config.seed,
        config,
        inputs,
        outputs,
        tool_version: TOOL_VERSION.to_string(),
        wall_clock_seconds: 0.0,
    }
}

fn digest_into(inputs: &mut BTreeMap<String, String>, path: &Path) -> Result<()> {
    inputs.insert(path.display().to_string(), file_digest(path)?);
    Ok(())
}

/// Reads a trajectory and its sidecar, checking it against `system` if given.
fn load_dataset(
    path: &Path,
    system: Option<SystemSpec>,
    inputs: &mut BTreeMap<String, String>,
) -> Result<(Trajectory, SystemSpec)> {
    let meta_file = dynamics::meta_path(path);
    let meta = TrajectoryMeta::read(&meta_file)?;
    let spec = meta.spec();
    if let Some(s) = system {
        if s != spec {
            return Err(invalid(format!(
                "config system {s:?} does not match dataset {} ({spec:?})",
                path.display()
            )));
        }
    }
    let traj = Trajectory::read_csv(path)?;
    if traj.n_dim() != spec.n_dim {
        return Err(invalid(format!(
            "dataset {} has {} columns but its metadata says n_dim = {}",
            path.display(),
            traj.n_dim(),
            spec.n_dim
        )));
    }
    digest_into(inputs, path)?;
    digest_into(inputs, &meta_file)?;
    Ok((traj, spec))
}

fn load_params(path: &Path, inputs: &mut BTreeMap<String, String>) -> Result<LstmParams> {
    let params = network::load_checkpoint(path)?;
    digest_into(inputs, path)?;
    Ok(params)
}

fn cmd_generate(args: &GenerateArgs) -> Result<Outcome> {
    let (mut config, preset) = resolve_config(&args.common)?;
    if let Some(s) = args.steps {
        config.generate.n_steps = s;
    }
    if let Some(w) = args.washout {
        config.generate.n_washout = w;
    }
    if let Some(r) = args.role {
        config.generate.role = r;
    }
    let spec = config.system.unwrap_or_default();
    spec.validate()?;
    config.system = Some(spec);
    let g = &config.generate;
    let seed = config.seed.wrapping_add(match g.role {
        DataRole::Train => seed_offset::TRAIN_DATA,
        DataRole::Test => seed_offset::TEST_DATA,
    });
    let dir = out_dir(&args.common);
    let csv = dir.join(format!("{}.csv", g.role.name()));
    let meta_file = dynamics::meta_path(&csv);
    refuse_existing(&[&csv, &meta_file], args.common.force)?;

    let traj = dynamics::generate_trajectory(&spec, &spec.default_initial_condition(), g.n_washout, g.n_steps, Some(seed))?;
    traj.write_csv(&csv)?;
    TrajectoryMeta {
        n_dim: spec.n_dim,
        forcing: spec.forcing,
        dt: spec.dt,
        n_washout: g.n_washout,
        n_steps: g.n_steps,
        seed: Some(seed),
        t0: traj.t0,
    }
    .write(&meta_file)?;
    eprintln!("wrote {} ({} states)", csv.display(), traj.len());
    let summary = json!({ "path": csv, "rows": traj.len(), "data_seed": seed });
    Ok(Outcome {
        manifest: manifest(config, preset, BTreeMap::new(), vec![csv, meta_file]),
        summary,
    })
}

fn apply_train_overrides(config: &mut RunConfig, args: &TrainArgs) {
    if let Some(d) = &args.data {
        config.dataset = Some(d.clone());
    }
    if let Some(a) = args.alpha_pi {
        config.train.alpha_pi = a;
    }
    if let Some(n) = args.n_hidden {
        config.train.n_hidden = n;
    }
    if let Some(e) = args.max_epochs {
        config.train.max_epochs = e;
    }
    if let Some(v) = args.cell_variant {
        config.train.cell_variant = v;
    }
    if let Some(u) = args.dd_units {
        config.train.dd_units = u;
    }
}

fn training_set(config: &mut RunConfig, inputs: &mut BTreeMap<String, String>) -> Result<TrainingSet> {
    let path = config
        .dataset
        .clone()
        .ok_or_else(|| invalid("no training dataset: pass --data or set `dataset`"))?;
    let (traj, spec) = load_dataset(&path, config.system, inputs)?;
    config.system = Some(spec);
    let split = config.split.resolve(spec.n_dim)?;
    config.train.validate()?;
    TrainingSet::from_trajectory(&traj, &split, &spec)
}

fn cmd_train(args: &TrainArgs) -> Result<Outcome> {
    let (mut config, preset) = resolve_config(&args.common)?;
    apply_train_overrides(&mut config, args);
    let dir = out_dir(&args.common);
    let ckpt = dir.join("checkpoint.txt");
    let history_file = dir.join("history.csv");
    refuse_existing(&[&ckpt, &history_file], args.common.force)?;
    let mut inputs = BTreeMap::new();
    let data = training_set(&mut config, &mut inputs)?;

    let (params, history) = training::train_with(&data, &config.train, &mut |r| {
        eprintln!(
            "epoch {:4}  train {:.4e}  val {:.4e} (l_dd {:.4e}, l_pi {:.4e})",
            r.epoch, r.train.l_total, r.val.l_total, r.val.l_dd, r.val.l_pi
        );
    })?;
    network::save_checkpoint(&params, &ckpt)?;
    write_atomic(&history_file, history.to_csv_string().as_bytes())?;
    let best = history.best();
    let summary = json!({
        "checkpoint": ckpt,
        "best_epoch": history.best_epoch,
        "epochs_run": history.epochs.len(),
        "stop_reason": history.stop_reason,
        "val": best.val,
    });
    Ok(Outcome {
        manifest: manifest(config, preset, inputs, vec![ckpt, history_file]),
        summary,
    })
}

fn cmd_sweep(args: &TrainArgs) -> Result<Outcome> {
    let (mut config, preset) = resolve_config(&args.common)?;
    apply_train_overrides(&mut config, args);
    let dir = out_dir(&args.common);
    let table = dir.join("sweep.csv");
    let mut inputs = BTreeMap::new();
    let data = training_set(&mut config, &mut inputs)?;

    let records = training::sweep(&data, &config.sweep, &config.train, Some(&dir), &mut |r| {
        match (&r.val, &r.error) {
            (Some(v), _) => eprintln!("trial {:3}  N_h {:3}  alpha_pi {:.0e}  val {:.4e}", r.index, r.n_hidden, r.alpha_pi, v.l_total),
            (None, Some(e)) => eprintln!("trial {:3} failed: {e}", r.index),
            _ => {}
        }
    })?;
    write_atomic(&table, training::sweep_table_csv(&records).as_bytes())?;
    let mut outputs = vec![table];
    outputs.extend(records.iter().filter_map(|r| r.checkpoint.clone()));
    let summary = json!({ "trials": records.len(), "best": records.first() });
    Ok(Outcome {
        manifest: manifest(config, preset, inputs, outputs),
        summary,
    })
}

/// `diag:a,b,...` → diagonal linear map.
pub fn parse_test_map(spec: &str) -> Result<LinearMap> {
    let entries = spec
        .strip_prefix("diag:")
        .ok_or_else(|| invalid(format!("unknown test map `{spec}` (expected diag:a,b,...)")))?;
    let values = entries
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| invalid(format!("bad map entry `{v}`"))))
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(invalid("empty test map"));
    }
    Ok(LinearMap::diagonal(&values))
}

fn washed_out_state(
    params: &LstmParams,
    test: Option<&Trajectory>,
    washout: usize,
) -> Result<LstmState> {
    let zero = LstmState::zeros(params.n_hidden);
    match test {
        Some(t) => {
            let n = washout.min(t.len());
            let inputs: Vec<DVector<f64>> = t.states[..n]
                .iter()
                .map(|y| params.normalize_observed(&params.split.project_observed(y)))
                .collect();
            if inputs.is_empty() {
                Ok(zero)
            } else {
                network::washout(params, &inputs, &zero)
            }
        }
        None => Ok(zero),
    }
}

fn cmd_lyapunov(args: &LyapunovArgs) -> Result<Outcome> {
    let (mut config, preset) = resolve_config(&args.common)?;
    if let Some(c) = &args.checkpoint {
        config.lyapunov.checkpoint = Some(c.clone());
    }
    if let Some(m) = &args.map {
        config.lyapunov.map = Some(m.clone());
    }
    if let Some(s) = args.steps {
        config.lyapunov.n_steps = s;
    }
    if let Some(t) = &args.test_data {
        config.test_dataset = Some(t.clone());
    }
    let dir = out_dir(&args.common);
    let out_csv = dir.join("spectrum.csv");
    let out_json = out_csv.with_extension("json");
    refuse_existing(&[&out_csv, &out_json], args.common.force)?;
    let mut inputs = BTreeMap::new();
    let lc = config.lyapunov.clone();

    let spectrum = if let Some(m) = &lc.map {
        let map = parse_test_map(m)?;
        let bc = BenettinConfig {
            n_exponents: lc.n_exponents.unwrap_or(map.dim()),
            n_steps: lc.n_steps,
            renorm_interval: lc.renorm_interval.unwrap_or(1),
            warmup: 0,
            dt: 1.0,
        };
        // the tangent of a linear map does not depend on the orbit; the origin keeps it bounded
        lyapunov::benettin_spectrum(&map, &DVector::zeros(map.dim()), &bc, m)?
    } else if let Some(ckpt) = &lc.checkpoint {
        let params = load_params(ckpt, &mut inputs)?;
        let test = match &config.test_dataset {
            Some(p) => Some(load_dataset(p, config.system, &mut inputs)?),
            None => None,
        };
        let spec = match (&test, config.system) {
            (Some((_, s)), _) => *s,
            (None, Some(s)) => s,
            (None, None) => SystemSpec {
                n_dim: params.n_dim(),
                ..SystemSpec::default()
            },
        };
        if params.n_dim() != spec.n_dim {
            return Err(invalid(format!(
                "checkpoint predicts {} components but the system has {}",
                params.n_dim(),
                spec.n_dim
            )));
        }
        config.system = Some(spec);
        let state = washed_out_state(&params, test.as_ref().map(|t| &t.0), config.evaluate.eval.washout)?;
        let map = NetworkMap::new(&params)?;
        let bc = BenettinConfig {
            n_exponents: lc.n_exponents.unwrap_or(spec.n_dim.min(map.dim())),
            n_steps: lc.n_steps,
            renorm_interval: lc.renorm_interval.unwrap_or(1),
            warmup: lc.warmup,
            dt: spec.dt,
        };
        lyapunov::benettin_spectrum(&map, &state.to_vector(), &bc, "network")?
    } else {
        let spec = config.system.unwrap_or_default();
        config.system = Some(spec);
        let bc = BenettinConfig {
            n_exponents: lc.n_exponents.unwrap_or(spec.n_dim),
            n_steps: lc.n_steps,
            renorm_interval: lc.renorm_interval.unwrap_or(10),
            warmup: lc.warmup,
            dt: spec.dt,
        };
        lyapunov::reference_spectrum(&spec, &bc)?
    };
    spectrum.write(&out_csv)?;
    eprintln!(
        "lambda_1 = {:.4}, {} positive, sum = {:.4}",
        spectrum.leading(),
        spectrum.n_positive(),
        spectrum.sum()
    );
    let summary = json!({
        "exponents": spectrum.exponents,
        "n_positive": spectrum.n_positive(),
        "sum": spectrum.sum(),
        "lyapunov_time": spectrum.lyapunov_time(),
    });
    Ok(Outcome {
        manifest: manifest(config, preset, inputs, vec![out_csv, out_json]),
        summary,
    })
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<Outcome> {
    let (mut config, preset) = resolve_config(&args.common)?;
    let ec = &mut config.evaluate;
    if !args.checkpoint.is_empty() {
        ec.checkpoints = args.checkpoint.clone();
    }
    if !args.label.is_empty() {
        ec.labels = args.label.clone();
    }
    if let Some(r) = &args.reference {
        ec.reference_spectrum = Some(r.clone());
    }
    if args.identity {
        ec.identity = true;
    }
    if let Some(t) = args.rollout_lyap_times {
        ec.eval.rollout_lyap_times = t;
    }
    if let Some(t) = &args.test_data {
        config.test_dataset = Some(t.clone());
    }
    let ec = config.evaluate.clone();
    if ec.checkpoints.is_empty() && !ec.identity {
        return Err(invalid("nothing to evaluate: pass --checkpoint or --identity"));
    }
    if !ec.labels.is_empty() && ec.labels.len() != ec.checkpoints.len() {
        return Err(invalid("give one --label per --checkpoint"));
    }
    let labels: Vec<String> = if ec.labels.is_empty() {
        (1..=ec.checkpoints.len()).map(|k| format!("model_{k}")).collect()
    } else {
        ec.labels.clone()
    };
    let dir = out_dir(&args.common);
    refuse_existing(&[&dir.join("report.json"), &dir.join("les_table.csv")], args.common.force)?;

    let mut inputs = BTreeMap::new();
    let test_path = config
        .test_dataset
        .clone()
        .ok_or_else(|| invalid("no test dataset: pass --test-data or set `test_dataset`"))?;
    let (test, spec) = load_dataset(&test_path, config.system, &mut inputs)?;
    config.system = Some(spec);
    // validate every checkpoint before any long computation
    let models = ec
        .checkpoints
        .iter()
        .map(|p| {
            let params = load_params(p, &mut inputs)?;
            if params.n_dim() != spec.n_dim {
                return Err(invalid(format!(
                    "checkpoint {} predicts {} components but the test data has {}",
                    p.display(),
                    params.n_dim(),
                    spec.n_dim
                )));
            }
            Ok(params)
        })
        .collect::<Result<Vec<_>>>()?;

    let reference = match &ec.reference_spectrum {
        Some(p) => {
            digest_into(&mut inputs, p)?;
            LyapunovSpectrum::read(p)?
        }
        None => {
            eprintln!("computing reference spectrum ({} steps)", config.lyapunov.n_steps);
            let bc = BenettinConfig {
                n_steps: config.lyapunov.n_steps,
                warmup: config.lyapunov.warmup,
                ..BenettinConfig::reference(&spec)
            };
            lyapunov::reference_spectrum(&spec, &bc)?
        }
    };

    let mut outputs = Vec::new();
    let push_report_files = |d: &Path, report: &evaluation::ReconstructionReport, outputs: &mut Vec<PathBuf>| {
        outputs.push(d.join("report.json"));
        outputs.push(d.join("les.csv"));
        outputs.extend(report.unmeasured().map(|v| d.join(format!("pdf_{}.csv", v.name()))));
    };
    let summary = if ec.identity {
        let split = config.split.resolve(spec.n_dim)?;
        let report = evaluation::evaluate_identity(&test, &split, &reference, &ec.eval)?;
        report.write(&dir)?;
        push_report_files(&dir, &report, &mut outputs);
        json!({ "identity": true, "max_wasserstein": report.variables.iter().map(|v| v.wasserstein).fold(0.0, f64::max) })
    } else {
        let mut reports = Vec::with_capacity(models.len());
        for (params, label) in models.iter().zip(&labels) {
            eprintln!("evaluating {label}");
            let report = evaluation::evaluate_model(params, &test, &spec, &reference, &ec.eval, label)?;
            let d = if models.len() == 1 { dir.clone() } else { dir.join(label) };
            report.write(&d)?;
            push_report_files(&d, &report, &mut outputs);
            reports.push(report);
        }
        if reports.len() > 1 {
            let cmp = evaluation::compare_runs(&reports, &labels)?;
            let pdf = dir.join("pdf_distances.csv");
            let les = dir.join("les_table.csv");
            write_atomic(&pdf, cmp.pdf_csv().as_bytes())?;
            write_atomic(&les, cmp.le_csv().as_bytes())?;
            outputs.push(pdf);
            outputs.push(les);
        }
        Value::Array(
            reports
                .iter()
                .map(|r| {
                    json!({
                        "label": r.label,
                        "lambda1": r.model_spectrum.as_ref().map(|s| s.leading()),
                        "lambda1_rel_error": r.lambda1_rel_error,
                        "chaotic": r.chaotic,
                        "diverged": r.diverged,
                        "wasserstein_unmeasured": r.unmeasured().map(|v| v.wasserstein).collect::<Vec<_>>(),
                    })
                })
                .collect(),
        )
    };
    Ok(Outcome {
        manifest: manifest(config, preset, inputs, outputs),
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_subcommand() {
        for args in [
            vec!["pilstm", "generate", "--steps", "1"],
            vec!["pilstm", "train", "--preset", "case-i", "--alpha-pi", "0", "--n-h", "20"],
            vec!["pilstm", "sweep", "--data", "x.csv", "--dd-units", "physical"],
            vec!["pilstm", "lyapunov", "--map", "diag:2,0.5"],
            vec!["pilstm", "evaluate", "--checkpoint", "a", "--checkpoint", "b", "--identity"],
        ] {
            Cli::try_parse_from(&args).unwrap();
        }
        assert!(Cli::try_parse_from(["pilstm", "fly"]).is_err());
    }

    #[test]
    fn preset_then_flags() {
        let common = CommonArgs {
            preset: Some("case-iii".into()),
            seed: Some(7),
            ..Default::default()
        };
        let (mut config, preset) = resolve_config(&common).unwrap();
        assert_eq!(preset.as_deref(), Some("case-iii"));
        assert_eq!(config.preset, None);
        assert_eq!(config.split.n_unmeasured, 5);
        assert_eq!((config.train.n_hidden, config.train.alpha_pi), (50, 0.001));
        assert_eq!(config.train.seed, 7 + seed_offset::TRAINING);
        apply_train_overrides(
            &mut config,
            &TrainArgs {
                alpha_pi: Some(0.0),
                dd_units: Some(DataLossUnits::Physical),
                ..Default::default()
            },
        );
        assert_eq!(config.train.alpha_pi, 0.0);
        assert_eq!(config.train.dd_units, DataLossUnits::Physical);
    }

    #[test]
    fn test_map_parsing() {
        let m = parse_test_map("diag:2, 0.5").unwrap();
        assert_eq!(m.dim(), 2);
        assert!(parse_test_map("eye:3").is_err());
        assert!(parse_test_map("diag:a").is_err());
    }

    #[test]
    fn split_config_resolution() {
        let s = SplitConfig::default().resolve(10).unwrap();
        assert_eq!(s.unmeasured(), &[9]);
        let explicit = SplitConfig {
            observed: Some(vec![1, 2, 3]),
            unmeasured: Some(vec![0]),
            ..Default::default()
        };
        assert_eq!(explicit.resolve(4).unwrap().observed(), &[1, 2, 3]);
        let half = SplitConfig {
            observed: Some(vec![0]),
            ..Default::default()
        };
        assert!(half.resolve(4).is_err());
    }
}
