//! Grid search over hidden size and physics weight, ranked by validation loss.
//!
//! `cargo run --release --example hyperparameter_sweep -- [max_epochs]`

use pilstm::dynamics::{generate_trajectory, ObservationSplit, SystemSpec};
use pilstm::training::{sweep, sweep_table_csv, SweepGrid, TrainConfig, TrainingSet};

fn main() -> pilstm::Result<()> {
    let max_epochs: usize = std::env::args().nth(1).map_or(5, |s| s.parse().expect("max_epochs"));
    let spec = SystemSpec::default();
    let traj = generate_trajectory(&spec, &spec.default_initial_condition(), 10_000, 5_000, Some(0))?;
    let data = TrainingSet::from_trajectory(&traj, &ObservationSplit::tail(spec.n_dim, 3)?, &spec)?;

    // a slice of the full grid (N_h in {20, 50, 100}, alpha_pi in 1e-9..1)
    let grid = SweepGrid { n_hidden: vec![20, 50], alpha_pi: vec![1e-3, 1e-2, 1e-1] };
    let base = TrainConfig { max_epochs, ..TrainConfig::default() };
    let ranked = sweep(&data, &grid, &base, None, &mut |t| {
        println!("trial {} (N_h {}, alpha_pi {}) done", t.index, t.n_hidden, t.alpha_pi);
    })?;
    print!("{}", sweep_table_csv(&ranked));
    Ok(())
}
