use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use super::{DynamicalModel, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CatalogError {
    #[error("a model named `{0}` is already registered")]
    DuplicateName(String),
    #[error("no model named `{0}`")]
    UnknownModel(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Registry of named models.
#[derive(Debug, Clone, Default)]
pub struct ModelCatalog {
    models: BTreeMap<String, Arc<DynamicalModel>>,
}

impl ModelCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Catalog holding the four built-in benchmark models.
    pub fn builtin() -> Self {
        let mut catalog = Self::new();
        for model in [
            lotka_volterra(true),
            lotka_volterra(false),
            two_zone_box(true),
            two_zone_box(false),
        ] {
            catalog
                .register_model(model)
                .expect("built-in models are valid and uniquely named");
        }
        catalog
    }

    pub fn register_model(&mut self, model: DynamicalModel) -> Result<(), CatalogError> {
        if self.models.contains_key(model.name()) {
            return Err(CatalogError::DuplicateName(model.name().to_string()));
        }
        model.validate()?;
        self.models.insert(model.name().to_string(), Arc::new(model));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Arc<DynamicalModel>, CatalogError> {
        self.models
            .get(name)
            .cloned()
            .ok_or_else(|| CatalogError::UnknownModel(name.to_string()))
    }

    /// Registered names in sorted order.
    pub fn names(&self) -> Vec<String> {
        self.models.keys().cloned().collect()
    }
}

/// Predator-prey system. The truncated variant drops both interaction terms
/// (`-beta*x*y` and `+delta*x*y`).
fn lotka_volterra(full: bool) -> DynamicalModel {
    let builder = DynamicalModel::builder(if full {
        "lotka_volterra_full"
    } else {
        "lotka_volterra_truncated"
    })
    .differential("x")
    .differential("y")
    .param("alpha", 1.3, "1/s")
    .param("beta", 0.9, "1/s")
    .param("gamma", 0.8, "1/s")
    .param("delta", 1.8, "1/s")
    .param("x0", 0.44249, "-")
    .param("y0", 4.6280, "-")
    .observe(&["x", "y"])
    .initial_state(|p| vec![p[4], p[5]]);
    let builder = if full {
        builder.rhs(|u, _x, p, _t, du| {
            du[0] = p[0] * u[0] - p[1] * u[0] * u[1];
            du[1] = -p[2] * u[1] + p[3] * u[0] * u[1];
        })
    } else {
        builder.rhs(|u, _x, p, _t, du| {
            du[0] = p[0] * u[0];
            du[1] = -p[2] * u[1];
        })
    };
    builder.build().expect("valid Lotka-Volterra model")
}

// Two-zone box parameter layout.
const L1: usize = 0;
const L2: usize = 1;
const T1_INIT: usize = 2;
const T2_INIT: usize = 3;
const T_AMB: usize = 4;
const H_IN: usize = 5;
const G_WALL: usize = 6;
const H_OUT: usize = 7;
const C_WALL: usize = 8;
const K_BULK: usize = 9;

/// Two lumped air zones (°C, hours) separated by a bulkhead. Each zone has a
/// two-layer wall to ambient; the zone's inner wall area per unit of air
/// capacity grows for short zones as `1 + 2/L`. The full model conducts heat
/// through the bulkhead at rate `k (T2 - T1)`, divided by each zone's air
/// capacity (proportional to its length). The truncated model omits it.
///
/// State order: `T1, T2, W1_in, W1_out, W2_in, W2_out`.
fn two_zone_box(full: bool) -> DynamicalModel {
    DynamicalModel::builder(if full {
        "two_zone_box_full"
    } else {
        "two_zone_box_truncated"
    })
    .differential("T1")
    .differential("T2")
    .differential("W1_in")
    .differential("W1_out")
    .differential("W2_in")
    .differential("W2_out")
    .param("L1", 9.0, "m")
    .param("L2", 4.5, "m")
    .param("T1_init", -20.0, "degC")
    .param("T2_init", 0.0, "degC")
    .param("T_amb", 30.0, "degC")
    .param("h_in", 0.6, "1/h")
    .param("g_wall", 0.08, "1/h")
    .param("h_out", 1.0, "1/h")
    .param("c_wall", 1.5, "-")
    .param("k", 0.3, "m/h")
    .observe(&["T1", "T2"])
    .initial_state(|p| {
        vec![
            p[T1_INIT], p[T2_INIT], p[T1_INIT], p[T1_INIT], p[T2_INIT], p[T2_INIT],
        ]
    })
    .rhs(move |u, _x, p, _t, du| {
        let (t1, t2) = (u[0], u[1]);
        let walls = [(u[2], u[3]), (u[4], u[5])];
        let lengths = [p[L1], p[L2]];
        let airs = [t1, t2];
        for zone in 0..2 {
            let (w_in, w_out) = walls[zone];
            let air = airs[zone];
            let area = 1.0 + 2.0 / lengths[zone];
            du[zone] = p[H_IN] * area * (w_in - air);
            du[2 + 2 * zone] =
                (p[H_IN] * (air - w_in) + p[G_WALL] * (w_out - w_in)) / p[C_WALL];
            du[3 + 2 * zone] =
                (p[G_WALL] * (w_in - w_out) + p[H_OUT] * (p[T_AMB] - w_out)) / p[C_WALL];
        }
        if full {
            let q = p[K_BULK] * (t2 - t1);
            du[0] += q / p[L1];
            du[1] -= q / p[L2];
        }
    })
    .build()
    .expect("valid two-zone box model")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::simulate;

    fn toy(name: &str) -> DynamicalModel {
        DynamicalModel::builder(name)
            .differential("u")
            .rhs(|u, _x, _p, _t, du| du[0] = -u[0])
            .observe(&["u"])
            .initial_state(|_p| vec![1.0])
            .build()
            .unwrap()
    }

    #[test]
    fn register_and_retrieve() {
        let mut catalog = ModelCatalog::new();
        catalog.register_model(toy("a")).unwrap();
        let m = catalog.get("a").unwrap();
        assert_eq!(m.name(), "a");
        assert_eq!(m.n_diff(), 1);
        assert!(matches!(catalog.get("b"), Err(CatalogError::UnknownModel(_))));
    }

    #[test]
    fn duplicate_registration_fails() {
        let mut catalog = ModelCatalog::new();
        catalog.register_model(toy("a")).unwrap();
        assert_eq!(
            catalog.register_model(toy("a")),
            Err(CatalogError::DuplicateName("a".into()))
        );
    }

    #[test]
    fn builtins_are_listed_sorted() {
        let names = ModelCatalog::builtin().names();
        assert_eq!(
            names,
            vec![
                "lotka_volterra_full",
                "lotka_volterra_truncated",
                "two_zone_box_full",
                "two_zone_box_truncated"
            ]
        );
    }

    #[test]
    fn truncated_models_share_everything_but_rhs() {
        let catalog = ModelCatalog::builtin();
        for base in ["lotka_volterra", "two_zone_box"] {
            let full = catalog.get(&format!("{base}_full")).unwrap();
            let trunc = catalog.get(&format!("{base}_truncated")).unwrap();
            assert_eq!(full.states(), trunc.states());
            assert_eq!(full.params(), trunc.params());
            assert_eq!(full.output_names(), trunc.output_names());
            assert_eq!(full.observed_states(), trunc.observed_states());
        }
    }

    #[test]
    fn full_equals_truncated_when_hidden_term_is_off() {
        let catalog = ModelCatalog::builtin();
        let save: Vec<f64> = (0..=50).map(|i| i as f64 * 0.1).collect();
        let cases = [
            ("lotka_volterra", vec![("beta", 0.0), ("delta", 0.0)]),
            ("two_zone_box", vec![("k", 0.0)]),
        ];
        for (base, zero) in cases {
            let full = catalog.get(&format!("{base}_full")).unwrap();
            let trunc = catalog.get(&format!("{base}_truncated")).unwrap();
            let p = full.params_with(&zero).unwrap();
            let a = simulate(&full, &p, (0.0, 5.0), 0.01, &save).unwrap();
            let b = simulate(&trunc, &p, (0.0, 5.0), 0.01, &save).unwrap();
            assert_eq!(a, b, "{base}");
        }
    }

    #[test]
    fn bulkhead_moves_heat_from_warm_to_cold_zone() {
        let catalog = ModelCatalog::builtin();
        let full = catalog.get("two_zone_box_full").unwrap();
        let trunc = catalog.get("two_zone_box_truncated").unwrap();
        let p = full.default_params();
        let a = simulate(&full, &p, (0.0, 10.0), 0.05, &[10.0]).unwrap();
        let b = simulate(&trunc, &p, (0.0, 10.0), 0.05, &[10.0]).unwrap();
        // Zone 1 starts colder, so the bulkhead warms it and cools zone 2.
        assert!(a.states[0][0] > b.states[0][0] + 0.5);
        assert!(a.states[0][1] < b.states[0][1] - 0.5);
    }
}
