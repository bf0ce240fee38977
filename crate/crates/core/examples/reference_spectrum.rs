//! Lyapunov spectrum of the Euler-discretized Lorenz-96 system.
//!
//! `cargo run --release --example reference_spectrum -- [n_steps]`

use pilstm::dynamics::SystemSpec;
use pilstm::lyapunov::{reference_spectrum, BenettinConfig};

fn main() -> pilstm::Result<()> {
    let n_steps: usize = std::env::args().nth(1).map_or(500_000, |s| s.parse().expect("n_steps"));
    let spec = SystemSpec::default();
    let config = BenettinConfig { n_steps, ..BenettinConfig::reference(&spec) };
    let spectrum = reference_spectrum(&spec, &config)?;
    for (k, l) in spectrum.exponents.iter().enumerate() {
        println!("lambda_{:<2} {l:+.4}", k + 1);
    }
    println!("positive: {}", spectrum.n_positive());
    println!("sum: {:.4} (the flow's trace is {})", spectrum.sum(), -(spec.n_dim as f64));
    if let Some(t) = spectrum.lyapunov_time() {
        println!("Lyapunov time: {t:.4}");
    }
    Ok(())
}
