//! Trains a physics-informed and a data-driven network on the same partial
//! observations and compares their closed-loop statistics of the unmeasured
//! variable against the true system.
//!
//! `cargo run --release --example reconstruct_and_compare -- [max_epochs] [rollout_lyap_times]`

use pilstm::dynamics::{generate_trajectory, SystemSpec};
use pilstm::evaluation::{compare_runs, evaluate_identity, evaluate_model, EvalConfig};
use pilstm::lyapunov::{reference_spectrum, BenettinConfig};
use pilstm::training::{preset, train, TrainConfig, TrainingSet};

fn main() -> pilstm::Result<()> {
    let mut args = std::env::args().skip(1);
    let max_epochs: usize = args.next().map_or(20, |s| s.parse().expect("max_epochs"));
    let rollout: f64 = args.next().map_or(50.0, |s| s.parse().expect("rollout_lyap_times"));

    let spec = SystemSpec::default();
    let y0 = spec.default_initial_condition();
    let train_traj = generate_trajectory(&spec, &y0, 10_000, 20_000, Some(0))?;
    let test_traj = generate_trajectory(&spec, &y0, 10_000, 5_000 + (rollout * 70.0) as usize, Some(1))?;
    let reference = reference_spectrum(&spec, &BenettinConfig { n_steps: 100_000, ..BenettinConfig::reference(&spec) })?;

    let case = preset("case-i")?;
    let split = case.split(spec.n_dim)?;
    let data = TrainingSet::from_trajectory(&train_traj, &split, &spec)?;
    let eval = EvalConfig { rollout_lyap_times: rollout, le_warmup: 1_000, ..EvalConfig::default() };

    let mut reports = Vec::new();
    let labels: Vec<String> = ["pi", "dd"].map(String::from).to_vec();
    for alpha_pi in [case.alpha_pi, 0.0] {
        let mut config = TrainConfig { max_epochs, ..TrainConfig::default() };
        case.apply(&mut config);
        config.alpha_pi = alpha_pi;
        let (params, history) = train(&data, &config)?;
        println!("alpha_pi = {alpha_pi}: best val L_dd {:.3e}", history.best().val.l_dd);
        reports.push(evaluate_model(&params, &test_traj, &spec, &reference, &eval, if alpha_pi > 0.0 { "pi" } else { "dd" })?);
    }
    let truth = evaluate_identity(&test_traj, &split, &reference, &eval)?;

    for (label, report) in labels.iter().zip(&reports) {
        let l1 = report.model_spectrum.as_ref().map(|s| s.leading());
        println!("{label}: lambda_1 {l1:?}, diverged {}, chaotic {}", report.diverged, report.chaotic);
        for v in report.unmeasured() {
            println!("  {}: W1 / std = {:.3}", v.name(), v.relative_wasserstein());
        }
    }
    println!("sanity: the true trajectory against itself gives W1 = {:?}", truth.unmeasured().map(|v| v.wasserstein).collect::<Vec<_>>());
    let table = compare_runs(&reports, &labels)?;
    print!("{}", table.pdf_csv());
    Ok(())
}
