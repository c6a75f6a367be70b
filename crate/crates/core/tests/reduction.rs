use std::sync::Arc;

use modeldisc_core::data::{generate_dataset, uniform_grid, Role, TimeSeriesDataset};
use modeldisc_core::model::{DynamicalModel, ModelCatalog};
use modeldisc_core::nn::{MlpSpec, Normalizer};
use modeldisc_core::reduction::{mask_search, output_significance, restrict_outputs, sensitivity};
use modeldisc_core::training::{train, TrainingConfig};
use modeldisc_core::ude::{loss, AugmentedModel};

fn decay4() -> Arc<DynamicalModel> {
    Arc::new(
        DynamicalModel::builder("decay4")
            .differential("a")
            .differential("b")
            .differential("c")
            .differential("d")
            .rhs(|u, _x, _p, _t, du| {
                for i in 0..4 {
                    du[i] = -u[i];
                }
            })
            .observe(&["a", "b", "c", "d"])
            .initial_state(|_p| vec![1.0; 4])
            .build()
            .unwrap(),
    )
}

#[test]
fn constant_correction_on_one_equation_gives_its_ratio() {
    // With du3 = -u3 + c and u3(0) = 1 the derivative peaks at t = 0 with
    // magnitude 1 - c, so the ratio is c / (1 - c); c = 1/11 makes it 0.1.
    let model = decay4();
    let grid = uniform_grid(0.0, 3.0, 31);
    let ds = generate_dataset(&model, "d", vec![], &grid, 0.01, Role::Train).unwrap();
    let aug = AugmentedModel::new(
        model,
        MlpSpec::new(4, &[], 4),
        Normalizer::identity(4, 4),
        vec![true; 4],
        vec![true; 4],
        0.01,
    )
    .unwrap();
    let mut theta = vec![0.0; aug.n_params()];
    theta[16 + 3] = 1.0 / 11.0;
    let ratios = output_significance(&aug, &theta, &[ds]).unwrap();
    assert_eq!(&ratios[..3], &[0.0, 0.0, 0.0]);
    assert!((ratios[3] - 0.1).abs() < 1e-12, "{}", ratios[3]);
}

fn lv_short() -> (AugmentedModel, Vec<TimeSeriesDataset>) {
    let catalog = ModelCatalog::builtin();
    let full = catalog.get("lotka_volterra_full").unwrap();
    let trunc = catalog.get("lotka_volterra_truncated").unwrap();
    let grid = uniform_grid(0.0, 1.5, 16);
    let a = generate_dataset(&full, "a", full.default_params(), &grid, 0.01, Role::Train).unwrap();
    let p = full.params_with(&[("x0", 1.0), ("y0", 2.0)]).unwrap();
    let b = generate_dataset(&full, "b", p, &grid, 0.01, Role::Train).unwrap();
    let aug = AugmentedModel::full(trunc, &[6], Normalizer::identity(2, 2), 0.05).unwrap();
    (aug, vec![a, b])
}

#[test]
fn full_mask_restriction_reproduces_trained_loss() {
    let (aug, data) = lv_short();
    let cfg = TrainingConfig {
        max_iters: 50,
        ..TrainingConfig::default()
    };
    let rec = train(&aug, &data, &cfg).unwrap();
    let (same, theta) = restrict_outputs(&aug, &rec.theta, &[true, true]).unwrap();
    let l = loss(&same, &theta, &data).unwrap().value;
    assert!((l - rec.final_loss).abs() <= 1e-9);
}

#[test]
fn base_model_data_picks_a_single_output() {
    let catalog = ModelCatalog::builtin();
    let trunc = catalog.get("lotka_volterra_truncated").unwrap();
    let grid = uniform_grid(0.0, 1.0, 11);
    let ds = generate_dataset(&trunc, "own", trunc.default_params(), &grid, 0.05, Role::Train).unwrap();
    let aug = AugmentedModel::full(trunc, &[4], Normalizer::identity(2, 2), 0.05).unwrap();
    let cfg = TrainingConfig {
        max_iters: 20,
        ..TrainingConfig::default()
    };
    let data = vec![ds];
    let full = train(&aug, &data, &cfg).unwrap();
    let ratios = output_significance(&aug, &full.theta, &data).unwrap();
    let rep = mask_search(&aug, &full, &data, &ratios, &cfg, 1.05).unwrap();
    assert_eq!(rep.chosen_k, 1);
    assert!(rep.record.final_loss <= 1e-12);
}

#[test]
fn sensitivity_ignores_dataset_order() {
    let (aug, data) = lv_short();
    let theta: Vec<f64> = (0..aug.n_params()).map(|i| 0.3 * (1.7 * i as f64).sin()).collect();
    let a = sensitivity(&aug, &theta, &data, 7).unwrap();
    let swapped = vec![data[1].clone(), data[0].clone()];
    let b = sensitivity(&aug, &theta, &swapped, 7).unwrap();
    assert_eq!(a, b);
    assert!(a.jac.iter().flatten().all(|v| *v >= 0.0));
    let mut ranking = a.input_ranking.clone();
    ranking.sort();
    assert_eq!(ranking, vec![0, 1]);
}
