//! BPTT and Jacobian checks against central finite differences.

mod common;

use nalgebra::DVector;
use pilstm::dynamics::{lorenz96_jacobian, lorenz96_rhs, SystemSpec};
use pilstm::lyapunov::{ode_tangent_map, TangentMap};
use pilstm::network::{
    cell_jacobian, closed_loop_jacobian, CellVariant, LstmState, NetworkMap, WEIGHT_NAMES,
};
use pilstm::training::{batch_gradient, bptt_gradient, window_loss, DataLossUnits, LossWeights, Window};

use common::{fd_gradient, fd_jacobian, rel_frobenius, tiny_params, tiny_window, worst_group_error};

#[test]
fn lorenz96_jacobian_matches_finite_differences() {
    let spec = SystemSpec::default();
    for draw in 0..100u64 {
        let y = common::random_vector(10, draw, 6.0).add_scalar(2.0);
        let analytic = lorenz96_jacobian(&y, spec.forcing).unwrap();
        let fd = fd_jacobian(|v| lorenz96_rhs(v, spec.forcing).unwrap(), &y, 1e-6);
        assert!(rel_frobenius(&analytic, &fd) < 1e-7, "draw {draw}");
        assert_eq!(analytic.trace(), -10.0);
    }
}

#[test]
fn euler_map_jacobian_matches_finite_differences() {
    let map = ode_tangent_map(SystemSpec::default());
    for draw in 0..10u64 {
        let y = common::random_vector(10, 500 + draw, 6.0).add_scalar(2.0);
        let fd = fd_jacobian(|v| map.apply(v).unwrap(), &y, 1e-6);
        assert!(rel_frobenius(&map.jacobian(&y), &fd) < 1e-7);
    }
}

#[test]
fn cell_jacobian_matches_finite_differences() {
    for variant in [CellVariant::Squashed, CellVariant::Standard] {
        for draw in 0..20u64 {
            let p = tiny_params(draw, variant);
            let x = common::random_vector(4, 900 + draw, 1.0);
            let s = common::random_vector(8, 700 + draw, 0.9);
            let state = LstmState::from_vector(&s);
            let analytic = cell_jacobian(&p, &x, &state).unwrap();
            let fd = fd_jacobian(
                |v| {
                    let (next, _) =
                        pilstm::network::cell_step(&p, &x, &LstmState::from_vector(v)).unwrap();
                    next.to_vector()
                },
                &s,
                1e-6,
            );
            let err = rel_frobenius(&analytic, &fd);
            assert!(err < 1e-6, "{variant} draw {draw}: {err:e}");
        }
    }
}

#[test]
fn closed_loop_jacobian_matches_finite_differences() {
    for draw in 0..20u64 {
        let p = tiny_params(40 + draw, CellVariant::Squashed);
        let map = NetworkMap::new(&p).unwrap();
        let s = common::random_vector(8, 300 + draw, 0.9);
        let analytic = closed_loop_jacobian(&p, &LstmState::from_vector(&s)).unwrap();
        let fd = fd_jacobian(|v| map.apply(v).unwrap(), &s, 1e-6);
        let err = rel_frobenius(&analytic, &fd);
        assert!(err < 1e-6, "draw {draw}: {err:e}");
    }
}

fn loss_settings() -> Vec<(f64, DataLossUnits)> {
    [DataLossUnits::Normalized, DataLossUnits::Physical]
        .into_iter()
        .flat_map(|u| [0.0, 0.01, 1.0].map(|a| (a, u)))
        .collect()
}

#[test]
fn physical_data_loss_scales_by_observed_variance() {
    let spec = SystemSpec::new(6, 8.0, 0.01).unwrap();
    let mut p = tiny_params(4, CellVariant::Squashed);
    p.norm_std.fill(2.5);
    let window = tiny_window(&p, 10, 33);
    let phys = LossWeights { alpha_pi: 0.0, dd_units: DataLossUnits::Physical };
    let a = window_loss(&p, &window, &spec, 0.0).unwrap().l_dd;
    let b = window_loss(&p, &window, &spec, phys).unwrap().l_dd;
    assert!((b - 6.25 * a).abs() <= 1e-12 * b);
}

#[test]
fn bptt_matches_finite_differences_for_every_parameter() {
    let spec = SystemSpec::new(6, 8.0, 0.01).unwrap();
    for variant in [CellVariant::Squashed, CellVariant::Standard] {
        for draw in 0..5u64 {
            for (alpha_pi, dd_units) in loss_settings() {
                let lw = LossWeights { alpha_pi, dd_units };
                let p = tiny_params(draw, variant);
                let window = tiny_window(&p, 10, 100 + draw);
                let (grads, loss) = bptt_gradient(&p, &window, &spec, lw).unwrap();
                let reference = window_loss(&p, &window, &spec, lw).unwrap();
                assert!((loss.l_total - reference.l_total).abs() <= 1e-12 * reference.l_total.max(1.0));
                let fd = fd_gradient(&p, &window, &spec, lw, 1e-6);
                let (group, worst) = worst_group_error(&p, &grads.to_flat(), &fd);
                assert!(
                    worst < 1e-6,
                    "{variant} draw {draw} alpha {alpha_pi} {dd_units}: {group} relative error {worst:e}"
                );
            }
        }
    }
}

#[test]
fn gradient_is_linear_in_alpha() {
    let spec = SystemSpec::new(6, 8.0, 0.01).unwrap();
    let p = tiny_params(3, CellVariant::Squashed);
    let window = tiny_window(&p, 10, 77);
    let alpha = 0.37;
    let (g_total, _) = bptt_gradient(&p, &window, &spec, alpha).unwrap();
    let (g_dd, _) = bptt_gradient(&p, &window, &spec, 0.0).unwrap();
    let (mut g_pi, _) = bptt_gradient(&p, &window, &spec, 1.0).unwrap();
    g_pi.add_scaled(&g_dd, -1.0);
    let mut combined = g_dd.clone();
    combined.add_scaled(&g_pi, alpha);
    let diff = g_total
        .to_flat()
        .iter()
        .zip(combined.to_flat())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(diff < 1e-12, "max abs discrepancy {diff:e}");
}

#[test]
fn zero_error_window_has_zero_gradient() {
    let spec = SystemSpec::new(6, 8.0, 0.01).unwrap();
    let mut p = tiny_params(8, CellVariant::Squashed);
    // constant readout equal to the targets
    p.weights.w_dense.fill(0.0);
    p.weights.b_dense = DVector::from_vec(vec![0.25, -0.5, 1.0, 0.0, 2.0, 3.0]);
    let target = p.weights.b_dense.rows(0, 4).into_owned();
    let inputs: Vec<_> = (0..6).map(|k| common::random_vector(4, k, 1.0)).collect();
    let window = Window {
        inputs,
        targets: vec![target; 6],
    };
    let (g, loss) = bptt_gradient(&p, &window, &spec, 0.0).unwrap();
    assert_eq!(loss.l_dd, 0.0);
    assert_eq!(g.max_abs(), 0.0);
    assert_eq!(WEIGHT_NAMES.len(), 10);
}

#[test]
fn batched_gradient_equals_sum_of_window_gradients() {
    let spec = SystemSpec::new(6, 8.0, 0.01).unwrap();
    for variant in [CellVariant::Squashed, CellVariant::Standard] {
        for (alpha_pi, dd_units) in loss_settings() {
            let alpha = LossWeights { alpha_pi, dd_units };
            let p = tiny_params(17, variant);
            let windows: Vec<Window> = (0..5).map(|s| tiny_window(&p, 10, 60 + s)).collect();
            let refs: Vec<&Window> = windows.iter().collect();
            let (batched, losses) = batch_gradient(&p, &refs, &spec, alpha).unwrap();
            let mut summed = vec![0.0; batched.to_flat().len()];
            for (w, loss) in windows.iter().zip(&losses) {
                let (g, single) = bptt_gradient(&p, w, &spec, alpha).unwrap();
                for (acc, v) in summed.iter_mut().zip(g.to_flat()) {
                    *acc += v;
                }
                assert!((single.l_total - loss.l_total).abs() <= 1e-12 * single.l_total.max(1.0));
            }
            let scale = summed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, b) in batched.to_flat().iter().zip(&summed) {
                assert!((a - b).abs() <= 1e-12 * scale, "{variant} {alpha:?}");
            }
        }
    }
}
