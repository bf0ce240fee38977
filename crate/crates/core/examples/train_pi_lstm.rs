//! Trains a physics-informed LSTM with the case (i) preset: y10 unmeasured,
//! N_h = 100, alpha_pi = 0.01.
//!
//! `cargo run --release --example train_pi_lstm -- [max_epochs] [checkpoint]`

use std::path::PathBuf;

use pilstm::dynamics::{generate_trajectory, SystemSpec};
use pilstm::network::save_checkpoint;
use pilstm::training::{preset, train_with, TrainConfig, TrainingSet};

fn main() -> pilstm::Result<()> {
    let mut args = std::env::args().skip(1);
    let max_epochs: usize = args.next().map_or(30, |s| s.parse().expect("max_epochs"));
    let out = args.next().map_or_else(|| std::env::temp_dir().join("pilstm_case_i.txt"), PathBuf::from);

    let spec = SystemSpec::default();
    let traj = generate_trajectory(&spec, &spec.default_initial_condition(), 10_000, 20_000, Some(0))?;
    let case = preset("case-i")?;
    let data = TrainingSet::from_trajectory(&traj, &case.split(spec.n_dim)?, &spec)?;
    let mut config = TrainConfig { max_epochs, ..TrainConfig::default() };
    case.apply(&mut config);

    let (params, history) = train_with(&data, &config, &mut |e| {
        println!(
            "epoch {:4}  train L_dd {:.3e} L_pi {:.3e}  val L_dd {:.3e} L_pi {:.3e}",
            e.epoch, e.train.l_dd, e.train.l_pi, e.val.l_dd, e.val.l_pi
        );
    })?;
    let best = history.best();
    println!("best epoch {} (val L = {:.4e}), stop: {:?}", best.epoch, best.val.l_total, history.stop_reason);
    save_checkpoint(&params, &out)?;
    println!("checkpoint: {}", out.display());
    Ok(())
}
