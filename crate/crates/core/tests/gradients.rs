//! Finite-difference oracles for the network vjp and the discrete adjoint.

use std::sync::Arc;

use modeldisc_core::data::{generate_dataset, uniform_grid, Role, TimeSeriesDataset};
use modeldisc_core::model::{DynamicalModel, ModelCatalog};
use modeldisc_core::nn::{self, fit_normalizer, Activation, MlpSpec, Normalizer};
use modeldisc_core::ude::{loss, loss_gradient, AugmentedModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Finite differences carry an absolute roundoff error, so tiny components
/// are compared against `abs_floor` and larger ones relatively.
fn close(analytic: f64, fd: f64, rel: f64, abs_floor: f64) -> bool {
    let scale = analytic.abs().max(fd.abs());
    (analytic - fd).abs() <= abs_floor || (analytic - fd).abs() <= rel * scale
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, amp: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-amp..amp)).collect()
}

fn fd_scalar<F: Fn(&[f64]) -> f64>(x: &[f64], step: f64, f: F) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + step;
            let fp = f(&xp);
            xp[i] = x[i] - step;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn vjp_matches_central_differences(
        seed in any::<u64>(),
        input_dim in 1usize..5,
        output_dim in 1usize..4,
        hidden in prop::collection::vec(1usize..7, 0..3),
        softplus in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let activation = if softplus { Activation::Softplus } else { Activation::Tanh };
        let spec = MlpSpec::new(input_dim, &hidden, output_dim).with_activation(activation);
        let theta = random_vec(&mut rng, spec.n_params(), 1.0);
        let input = random_vec(&mut rng, input_dim, 2.0);
        let cot = random_vec(&mut rng, output_dim, 1.0);
        let (gt, gi) = nn::vjp(&spec, &theta, &input, &cot).unwrap();
        let dot = |out: Vec<f64>| out.iter().zip(&cot).map(|(a, b)| a * b).sum::<f64>();
        let fd_t = fd_scalar(&theta, 1e-6, |th| dot(nn::forward(&spec, th, &input).unwrap()));
        let fd_i = fd_scalar(&input, 1e-6, |x| dot(nn::forward(&spec, &theta, x).unwrap()));
        for (a, b) in gt.iter().zip(&fd_t).chain(gi.iter().zip(&fd_i)) {
            prop_assert!(close(*a, *b, 1e-5, 1e-8), "analytic {} vs fd {}", a, b);
        }
    }

    #[test]
    fn jacobian_rows_equal_unit_vjps(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = MlpSpec::new(3, &[5], 2);
        let theta = random_vec(&mut rng, spec.n_params(), 1.0);
        let input = random_vec(&mut rng, 3, 1.0);
        let jac = nn::jacobian(&spec, &theta, &input).unwrap();
        for (i, row) in jac.iter().enumerate() {
            let mut e = vec![0.0; 2];
            e[i] = 1.0;
            let (_, gi) = nn::vjp(&spec, &theta, &input, &e).unwrap();
            prop_assert_eq!(row, &gi);
        }
        // Column j against finite differences of the forward map.
        for j in 0..3 {
            let mut xp = input.clone();
            let mut xm = input.clone();
            xp[j] += 1e-6;
            xm[j] -= 1e-6;
            let fp = nn::forward(&spec, &theta, &xp).unwrap();
            let fm = nn::forward(&spec, &theta, &xm).unwrap();
            for i in 0..2 {
                let fd = (fp[i] - fm[i]) / 2e-6;
                prop_assert!(close(jac[i][j], fd, 1e-5, 1e-8));
            }
        }
    }

    #[test]
    fn normalized_training_inputs_are_standardized(
        rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 3), 2..40)
    ) {
        let reference = vec![vec![1.0]];
        let norm = fit_normalizer(&rows, &reference).unwrap();
        let mut scaled = vec![vec![0.0; 3]; rows.len()];
        for (r, s) in rows.iter().zip(scaled.iter_mut()) {
            norm.normalize_input(r, s);
        }
        let n = rows.len() as f64;
        for j in 0..3 {
            let raw_std = {
                let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
                (rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n).sqrt()
            };
            let mean = scaled.iter().map(|r| r[j]).sum::<f64>() / n;
            prop_assert!(mean.abs() <= 1e-10);
            if raw_std > 1e-6 {
                let std = (scaled.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!((std - 1.0).abs() <= 1e-10, "std {}", std);
            }
        }
    }
}

fn lv_problem(n_samples: usize) -> (AugmentedModel, Vec<TimeSeriesDataset>) {
    let catalog = ModelCatalog::builtin();
    let full = catalog.get("lotka_volterra_full").unwrap();
    let trunc = catalog.get("lotka_volterra_truncated").unwrap();
    let grid = uniform_grid(0.0, 5.0, n_samples);
    let ds = generate_dataset(&full, "lv", full.default_params(), &grid, 0.01, Role::Train).unwrap();
    let states: Vec<Vec<f64>> = ds.outputs.clone();
    let derivs: Vec<Vec<f64>> = states
        .iter()
        .map(|u| {
            let mut d = vec![0.0; 2];
            full.rhs(u, &[], &ds.config, 0.0, &mut d);
            d
        })
        .collect();
    let norm = fit_normalizer(&states, &derivs).unwrap();
    let aug = AugmentedModel::full(trunc, &[4], norm, 0.05).unwrap();
    (aug, vec![ds])
}

fn check_gradient(aug: &AugmentedModel, theta: &[f64], data: &[TimeSeriesDataset]) {
    let g = loss_gradient(aug, theta, data).unwrap();
    let fd = fd_scalar(theta, 1e-5, |th| loss(aug, th, data).unwrap().value);
    for (i, (a, b)) in g.iter().zip(&fd).enumerate() {
        assert!(close(*a, *b, 1e-3, 1e-6), "component {i}: adjoint {a} vs fd {b}");
    }
}

#[test]
fn adjoint_matches_finite_differences_on_lotka_volterra() {
    let (aug, data) = lv_problem(10);
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Small weights keep the augmented system close to the base dynamics.
        let theta = random_vec(&mut rng, aug.n_params(), 0.3);
        check_gradient(&aug, &theta, &data);
    }
}

#[test]
fn adjoint_matches_finite_differences_through_algebraic_states() {
    // x' = -a + 0.5 y, y' = -x, with 0 = a^3 + a - x.
    let model = DynamicalModel::builder("dae_osc")
        .differential("x")
        .differential("y")
        .algebraic("a")
        .param("c", 0.5, "-")
        .rhs(|u, _x, p, _t, du| {
            du[0] = -u[2] + p[0] * u[1];
            du[1] = -u[0];
        })
        .alg_residual(|u, _x, _p, _t, g| g[0] = u[2] * u[2] * u[2] + u[2] - u[0])
        .output_map(&["a_plus_y"], |u, _x, _p, _t, y| y[0] = u[2] + u[1] * u[1])
        .initial_state(|_p| vec![2.0, 0.0, 1.0])
        .build()
        .unwrap();
    let model = Arc::new(model);
    let grid = uniform_grid(0.0, 2.0, 9);
    // Data from a perturbed parameter so the residual is non-zero.
    let mut p = model.default_params();
    p[0] = 0.8;
    let mut ds = generate_dataset(&model, "dae", p, &grid, 0.01, Role::Train).unwrap();
    ds.config = model.default_params();
    let aug = AugmentedModel::full(model, &[3], Normalizer::identity(3, 2), 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let theta = random_vec(&mut rng, aug.n_params(), 0.3);
    check_gradient(&aug, &theta, &[ds]);
}

#[test]
fn masked_outputs_get_gradient_only_through_their_rows() {
    let (aug, data) = lv_problem(10);
    let masked = aug.with_output_mask(vec![true, false]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let theta = random_vec(&mut rng, masked.n_params(), 0.3);
    check_gradient(&masked, &theta, &data);
}
