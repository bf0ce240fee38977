//! Lyapunov spectrum of a trained network running in closed loop.
//!
//! `cargo run --release --example network_lyapunov -- <checkpoint> [n_steps]`
//!
//! Without a checkpoint a network is trained for a few epochs first, which is
//! enough to exercise the machinery but not to give a chaotic model.

use nalgebra::DVector;

use pilstm::dynamics::{generate_trajectory, split_observations, SystemSpec};
use pilstm::lyapunov::{benettin_spectrum, BenettinConfig, TangentMap};
use pilstm::network::{load_checkpoint, washout, LstmState, NetworkMap};
use pilstm::training::{preset, train, TrainConfig, TrainingSet};

fn main() -> pilstm::Result<()> {
    let mut args = std::env::args().skip(1);
    let checkpoint = args.next();
    let n_steps: usize = args.next().map_or(20_000, |s| s.parse().expect("n_steps"));
    let spec = SystemSpec::default();

    let params = match checkpoint {
        Some(path) => load_checkpoint(std::path::Path::new(&path))?,
        None => {
            let traj = generate_trajectory(&spec, &spec.default_initial_condition(), 10_000, 4_000, Some(0))?;
            let case = preset("case-i")?;
            let data = TrainingSet::from_trajectory(&traj, &case.split(spec.n_dim)?, &spec)?;
            let mut config = TrainConfig { max_epochs: 5, ..TrainConfig::default() };
            case.apply(&mut config);
            train(&data, &config)?.0
        }
    };

    // start the closed loop from a state driven by real observations
    let test = generate_trajectory(&spec, &spec.default_initial_condition(), 10_000, 200, Some(1))?;
    let (observed, _) = split_observations(&test, &params.split)?;
    let normalized: Vec<DVector<f64>> = observed
        .iter()
        .map(|x| {
            DVector::from_iterator(
                x.len(),
                params.split.observed().iter().zip(x.iter()).map(|(&k, v)| (v - params.norm_mean[k]) / params.norm_std[k]),
            )
        })
        .collect();
    let state = washout(&params, &normalized, &LstmState::zeros(params.n_hidden))?;

    let map = NetworkMap::new(&params)?;
    let config = BenettinConfig {
        n_exponents: spec.n_dim.min(map.dim()),
        n_steps,
        renorm_interval: 1,
        warmup: 1_000,
        dt: spec.dt,
    };
    let spectrum = benettin_spectrum(&map, &state.to_vector(), &config, "network")?;
    println!("closed-loop map of dimension {}", map.dim());
    for (k, l) in spectrum.exponents.iter().enumerate() {
        println!("lambda_{:<2} {l:+.4}", k + 1);
    }
    Ok(())
}
