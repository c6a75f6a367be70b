//! Semi-explicit dynamical models and their fixed-step simulation.
//!
//! A model is written as
//!
//! ```text
//! du_d/dt = f(u, x, p, t)
//!       0 = g(u, x, p, t)
//!       ŷ = h(u, x, p, t)
//! ```
//!
//! with the full state laid out as `u = [u_d..., u_a...]`. Differential states
//! always precede algebraic ones.

mod catalog;
pub(crate) mod solver;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use catalog::{CatalogError, ModelCatalog};
pub use solver::simulate;

/// Signature shared by `f`, `g` and `h`: `(u, x, p, t, out)`.
pub type ModelFn = Arc<dyn Fn(&[f64], &[f64], &[f64], f64, &mut [f64]) + Send + Sync>;
/// Exogenous input signal `t -> x`.
pub type ExogenousFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;
/// Initial condition map `p -> u(0)`.
pub type InitialFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateKind {
    Differential,
    Algebraic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVar {
    pub name: String,
    pub kind: StateKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub default: f64,
    pub unit: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model `{model}`: {reason}")]
    Invalid { model: String, reason: String },
    #[error("model `{model}`: initial state violates the algebraic constraints (|g| = {residual:e})")]
    InconsistentInitialState { model: String, residual: f64 },
    #[error("model `{model}`: algebraic Jacobian is singular, only index-1 systems are supported")]
    HigherIndex { model: String },
}

/// Errors raised while integrating a model.
#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
pub enum SimError {
    #[error("state became non-finite at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("algebraic solve failed at t = {t} (residual {residual:e})")]
    AlgebraicSolveFailed { t: f64, residual: f64 },
    #[error("invalid simulation request: {0}")]
    InvalidRequest(String),
}

/// A semi-explicit dynamical system.
#[derive(Clone)]
pub struct DynamicalModel {
    name: String,
    states: Vec<StateVar>,
    params: Vec<Parameter>,
    outputs: Vec<String>,
    observed: Vec<Option<usize>>,
    n_exogenous: usize,
    rhs: ModelFn,
    alg_residual: Option<ModelFn>,
    output_map: ModelFn,
    exogenous: Option<ExogenousFn>,
    u0_map: InitialFn,
}

impl fmt::Debug for DynamicalModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DynamicalModel")
            .field("name", &self.name)
            .field("states", &self.states)
            .field("params", &self.params)
            .field("outputs", &self.outputs)
            .finish_non_exhaustive()
    }
}

impl DynamicalModel {
    pub fn builder(name: impl Into<String>) -> ModelBuilder {
        ModelBuilder::new(name)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_diff(&self) -> usize {
        self.states.iter().filter(|s| s.kind == StateKind::Differential).count()
    }

    pub fn n_alg(&self) -> usize {
        self.states.len() - self.n_diff()
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn n_exogenous(&self) -> usize {
        self.n_exogenous
    }

    pub fn states(&self) -> &[StateVar] {
        &self.states
    }

    pub fn state_names(&self) -> Vec<String> {
        self.states.iter().map(|s| s.name.clone()).collect()
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s.name == name)
    }

    pub fn default_params(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.default).collect()
    }

    pub fn output_names(&self) -> &[String] {
        &self.outputs
    }

    /// For each output, the state it copies verbatim when the output map is a
    /// plain projection of that state.
    pub fn observed_states(&self) -> &[Option<usize>] {
        &self.observed
    }

    /// Builds a parameter vector from the defaults, overridden by `overrides`.
    pub fn params_with(&self, overrides: &[(&str, f64)]) -> Result<Vec<f64>, ModelError> {
        let mut p = self.default_params();
        for (name, value) in overrides {
            let idx = self.param_index(name).ok_or_else(|| ModelError::Invalid {
                model: self.name.clone(),
                reason: format!("unknown parameter `{name}`"),
            })?;
            p[idx] = *value;
        }
        Ok(p)
    }

    pub fn rhs(&self, u: &[f64], x: &[f64], p: &[f64], t: f64, out: &mut [f64]) {
        (self.rhs)(u, x, p, t, out)
    }

    pub fn alg_residual(&self, u: &[f64], x: &[f64], p: &[f64], t: f64, out: &mut [f64]) {
        if let Some(g) = &self.alg_residual {
            g(u, x, p, t, out)
        }
    }

    pub fn output(&self, u: &[f64], x: &[f64], p: &[f64], t: f64, out: &mut [f64]) {
        (self.output_map)(u, x, p, t, out)
    }

    pub fn exogenous(&self, t: f64, out: &mut [f64]) {
        if let Some(ex) = &self.exogenous {
            ex(t, out)
        }
    }

    pub fn initial_state(&self, p: &[f64]) -> Vec<f64> {
        (self.u0_map)(p)
    }

    /// Same model with a different differential right-hand side and name.
    /// Everything else (states, parameters, outputs, constraints) is shared.
    pub fn with_rhs(&self, name: impl Into<String>, rhs: ModelFn) -> DynamicalModel {
        DynamicalModel {
            name: name.into(),
            rhs,
            ..self.clone()
        }
    }

    /// Checks dimensions, finiteness and initial consistency at the default
    /// parameters. Rejects algebraic blocks with a singular Jacobian.
    pub fn validate(&self) -> Result<(), ModelError> {
        let invalid = |reason: String| ModelError::Invalid {
            model: self.name.clone(),
            reason,
        };
        if self.n_diff() == 0 {
            return Err(invalid("at least one differential state is required".into()));
        }
        if self.outputs.is_empty() {
            return Err(invalid("at least one output is required".into()));
        }
        let mut names: Vec<&str> = self
            .states
            .iter()
            .map(|s| s.name.as_str())
            .chain(self.params.iter().map(|p| p.name.as_str()))
            .collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(invalid(format!("name `{}` is used twice", w[0])));
        }
        if self.n_alg() > 0 && self.alg_residual.is_none() {
            return Err(invalid("algebraic states declared without a residual".into()));
        }

        let p = self.default_params();
        let u0 = self.initial_state(&p);
        if u0.len() != self.n_states() {
            return Err(invalid(format!(
                "initial state has length {}, expected {}",
                u0.len(),
                self.n_states()
            )));
        }
        let mut x = vec![0.0; self.n_exogenous];
        self.exogenous(0.0, &mut x);
        let mut du = vec![0.0; self.n_diff()];
        self.rhs(&u0, &x, &p, 0.0, &mut du);
        let mut y = vec![0.0; self.n_outputs()];
        self.output(&u0, &x, &p, 0.0, &mut y);
        if u0.iter().chain(&du).chain(&y).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite value at the default initial state".into()));
        }
        if self.n_alg() > 0 {
            let mut g = vec![0.0; self.n_alg()];
            self.alg_residual(&u0, &x, &p, 0.0, &mut g);
            let residual = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if !(residual <= 1e-8) {
                return Err(ModelError::InconsistentInitialState {
                    model: self.name.clone(),
                    residual,
                });
            }
            let jac = solver::algebraic_jacobian(self, &u0, &x, &p, 0.0);
            if jac.lu().determinant().abs() < 1e-12 {
                return Err(ModelError::HigherIndex {
                    model: self.name.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Incremental constructor for [`DynamicalModel`].
pub struct ModelBuilder {
    name: String,
    diff: Vec<String>,
    alg: Vec<String>,
    params: Vec<Parameter>,
    outputs: Vec<String>,
    observed: Vec<Option<String>>,
    output_map: Option<ModelFn>,
    n_exogenous: usize,
    rhs: Option<ModelFn>,
    alg_residual: Option<ModelFn>,
    exogenous: Option<ExogenousFn>,
    u0_map: Option<InitialFn>,
}

impl ModelBuilder {
    fn new(name: impl Into<String>) -> Self {
        ModelBuilder {
            name: name.into(),
            diff: Vec::new(),
            alg: Vec::new(),
            params: Vec::new(),
            outputs: Vec::new(),
            observed: Vec::new(),
            output_map: None,
            n_exogenous: 0,
            rhs: None,
            alg_residual: None,
            exogenous: None,
            u0_map: None,
        }
    }

    pub fn differential(mut self, name: &str) -> Self {
        self.diff.push(name.to_string());
        self
    }

    pub fn algebraic(mut self, name: &str) -> Self {
        self.alg.push(name.to_string());
        self
    }

    pub fn param(mut self, name: &str, default: f64, unit: &str) -> Self {
        self.params.push(Parameter {
            name: name.to_string(),
            default,
            unit: unit.to_string(),
        });
        self
    }

    pub fn rhs<F>(mut self, f: F) -> Self
    where
        F: Fn(&[f64], &[f64], &[f64], f64, &mut [f64]) + Send + Sync + 'static,
    {
        self.rhs = Some(Arc::new(f));
        self
    }

    pub fn alg_residual<F>(mut self, g: F) -> Self
    where
        F: Fn(&[f64], &[f64], &[f64], f64, &mut [f64]) + Send + Sync + 'static,
    {
        self.alg_residual = Some(Arc::new(g));
        self
    }

    /// Declares outputs that copy states by name. Mutually exclusive with
    /// [`ModelBuilder::output_map`].
    pub fn observe(mut self, states: &[&str]) -> Self {
        for s in states {
            self.outputs.push(s.to_string());
            self.observed.push(Some(s.to_string()));
        }
        self
    }

    /// General output map with named outputs.
    pub fn output_map<F>(mut self, names: &[&str], h: F) -> Self
    where
        F: Fn(&[f64], &[f64], &[f64], f64, &mut [f64]) + Send + Sync + 'static,
    {
        self.outputs = names.iter().map(|s| s.to_string()).collect();
        self.observed = vec![None; names.len()];
        self.output_map = Some(Arc::new(h));
        self
    }

    pub fn exogenous<F>(mut self, n: usize, x: F) -> Self
    where
        F: Fn(f64, &mut [f64]) + Send + Sync + 'static,
    {
        self.n_exogenous = n;
        self.exogenous = Some(Arc::new(x));
        self
    }

    pub fn initial_state<F>(mut self, u0: F) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        self.u0_map = Some(Arc::new(u0));
        self
    }

    pub fn build(self) -> Result<DynamicalModel, ModelError> {
        let invalid = |reason: &str| ModelError::Invalid {
            model: self.name.clone(),
            reason: reason.to_string(),
        };
        let rhs = self.rhs.clone().ok_or_else(|| invalid("missing rhs"))?;
        let u0_map = self
            .u0_map
            .clone()
            .ok_or_else(|| invalid("missing initial state map"))?;
        let states: Vec<StateVar> = self
            .diff
            .iter()
            .map(|n| StateVar {
                name: n.clone(),
                kind: StateKind::Differential,
            })
            .chain(self.alg.iter().map(|n| StateVar {
                name: n.clone(),
                kind: StateKind::Algebraic,
            }))
            .collect();

        let observed: Vec<Option<usize>> = self
            .observed
            .iter()
            .map(|o| match o {
                Some(name) => states
                    .iter()
                    .position(|s| &s.name == name)
                    .map(Some)
                    .ok_or_else(|| invalid(&format!("observed state `{name}` does not exist"))),
                None => Ok(None),
            })
            .collect::<Result<_, _>>()?;
        let output_map: ModelFn = match self.output_map.clone() {
            Some(h) => h,
            None => {
                let idx: Vec<usize> = observed.iter().map(|o| o.unwrap()).collect();
                Arc::new(move |u: &[f64], _x: &[f64], _p: &[f64], _t: f64, out: &mut [f64]| {
                    for (o, &i) in out.iter_mut().zip(&idx) {
                        *o = u[i];
                    }
                })
            }
        };

        let model = DynamicalModel {
            name: self.name.clone(),
            states,
            params: self.params.clone(),
            outputs: self.outputs.clone(),
            observed,
            n_exogenous: self.n_exogenous,
            rhs,
            alg_residual: self.alg_residual.clone(),
            output_map,
            exogenous: self.exogenous.clone(),
            u0_map,
        };
        model.validate()?;
        Ok(model)
    }
}

/// Sampled solution of a simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// `n_times × n_states`
    pub states: Vec<Vec<f64>>,
    /// `n_times × n_out`
    pub outputs: Vec<Vec<f64>>,
    /// `n_times × n_diff`, the differential right-hand side at each sample.
    pub derivatives: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> Option<&[f64]> {
        self.states.last().map(|s| s.as_slice())
    }
}
