//! Compares the BPTT gradient of the physics-informed loss against central
//! finite differences on a small random network.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pilstm::dynamics::{ObservationSplit, SystemSpec};
use pilstm::network::{init_params, CellVariant};
use pilstm::training::{bptt_gradient, window_loss, Window};

fn main() -> pilstm::Result<()> {
    let spec = SystemSpec::new(6, 8.0, 0.01)?;
    let split = ObservationSplit::tail(6, 2)?;
    let mut params = init_params(&split, 4, CellVariant::Squashed, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    params.norm_mean = DVector::from_fn(6, |_, _| rng.gen_range(1.0..3.0));
    params.norm_std = DVector::from_fn(6, |_, _| rng.gen_range(2.0..4.0));
    let seq: Vec<DVector<f64>> = (0..11).map(|_| DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0))).collect();
    let window = Window::from_sequence(&seq)?;

    for alpha in [0.0, 0.01, 1.0] {
        let (grad, loss) = bptt_gradient(&params, &window, &spec, alpha)?;
        let analytic = grad.to_flat();
        let base = params.weights.to_flat();
        let mut probe = params.clone();
        let h = 1e-6;
        let mut fd = Vec::with_capacity(base.len());
        for k in 0..base.len() {
            let mut flat = base.clone();
            flat[k] += h;
            probe.weights.set_flat(&flat);
            let up = window_loss(&probe, &window, &spec, alpha)?.l_total;
            flat[k] -= 2.0 * h;
            probe.weights.set_flat(&flat);
            let down = window_loss(&probe, &window, &spec, alpha)?.l_total;
            fd.push((up - down) / (2.0 * h));
        }
        println!("alpha_pi = {alpha}: L = {:.6e}", loss.l_total);
        let mut offset = 0;
        for (name, _, _, data) in params.weights.arrays() {
            let n = data.len();
            let (a, b) = (&analytic[offset..offset + n], &fd[offset..offset + n]);
            let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let norm = b.iter().map(|y| y * y).sum::<f64>().sqrt();
            println!("  {name:<8} relative error {:.2e}", diff / norm.max(f64::MIN_POSITIVE));
            offset += n;
        }
    }
    Ok(())
}
