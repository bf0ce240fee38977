//! Integrates Lorenz-96 with explicit Euler and prints per-component statistics.
//!
//! `cargo run --release --example lorenz96_trajectory -- [n_steps] [out.csv]`

use std::path::PathBuf;

use pilstm::dynamics::{generate_trajectory, ObservationSplit, SystemSpec};

fn main() -> pilstm::Result<()> {
    let mut args = std::env::args().skip(1);
    let n_steps: usize = args.next().map_or(20_000, |s| s.parse().expect("n_steps"));
    let out = args.next().map(PathBuf::from);

    let spec = SystemSpec::default();
    let traj = generate_trajectory(&spec, &spec.default_initial_condition(), 10_000, n_steps, Some(0))?;
    println!("{} states, t in [{:.2}, {:.2}]", traj.len(), traj.time(0), traj.time(traj.len() - 1));
    for k in 0..spec.n_dim {
        let v = traj.component(k);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        println!("y{:<2} mean {mean:6.3} std {std:6.3}", k + 1);
    }

    // what a case (i) network gets to see
    let split = ObservationSplit::tail(spec.n_dim, 1)?;
    println!("observed {:?}, unmeasured {:?}", split.observed(), split.unmeasured());

    if let Some(path) = out {
        traj.write_csv(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
