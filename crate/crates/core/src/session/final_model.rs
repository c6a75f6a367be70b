use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::SessionError;
use crate::data::{Role, TimeSeriesDataset};
use crate::model::{simulate, DynamicalModel, ModelCatalog, SimError};
use crate::symreg::{Expr, SymRegError};
use crate::ude::channel_errors;

/// Symbolic correction added to one differential equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    /// Name of the corrected differential state.
    pub equation: String,
    pub expression: Expr,
}

/// The base model plus accepted symbolic corrections. Holds no network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalModel {
    pub base_model: String,
    pub corrections: Vec<Correction>,
    /// RK4 step the corrections were calibrated with.
    pub dt: f64,
    pub session_id: String,
    pub decision_log_hash: String,
}

#[derive(Debug, Clone, Copy)]
enum Source {
    State(usize),
    Param(usize),
}

struct Bound {
    equation: usize,
    expression: Expr,
    sources: Vec<Source>,
}

impl FinalModel {
    /// Builds the corrected model: base right-hand side plus every expression
    /// on its equation. Expression variables resolve to states first, then to
    /// parameters.
    pub fn build(&self, catalog: &ModelCatalog) -> Result<DynamicalModel, SessionError> {
        let base = catalog.get(&self.base_model)?;
        let bound = self
            .corrections
            .iter()
            .map(|c| {
                let equation = base
                    .state_index(&c.equation)
                    .filter(|&i| i < base.n_diff())
                    .ok_or_else(|| SessionError::Invalid(format!("`{}` is not a differential state", c.equation)))?;
                let sources = c
                    .expression
                    .names
                    .iter()
                    .map(|n| {
                        base.state_index(n)
                            .map(Source::State)
                            .or_else(|| base.param_index(n).map(Source::Param))
                            .ok_or_else(|| SymRegError::UnresolvedReference(n.clone()))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(Bound {
                    equation,
                    expression: c.expression.clone(),
                    sources,
                })
            })
            .collect::<Result<Vec<_>, SessionError>>()?;
        let inner = base.clone();
        let rhs = move |u: &[f64], x: &[f64], p: &[f64], t: f64, du: &mut [f64]| {
            inner.rhs(u, x, p, t, du);
            let mut values = Vec::new();
            for b in &bound {
                values.clear();
                values.extend(b.sources.iter().map(|s| match *s {
                    Source::State(i) => u[i],
                    Source::Param(i) => p[i],
                }));
                du[b.equation] += b.expression.evaluate_values(&values);
            }
        };
        Ok(base.with_rhs(format!("{}+symbolic", self.base_model), Arc::new(rhs)))
    }
}

/// Held-out comparison of the base and the corrected model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub dataset: String,
    pub loss_base: Option<f64>,
    pub loss_final: Option<f64>,
    /// `(loss_base - loss_final) / loss_base`
    pub rel_improvement: Option<f64>,
    /// Why a value is missing (a simulation failed or the base loss is zero).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn test_loss(model: &DynamicalModel, ds: &TimeSeriesDataset, dt: f64) -> Result<f64, SimError> {
    let traj = simulate(model, &ds.config, ds.t_span(), dt, &ds.times)?;
    let per = channel_errors(&traj.outputs, ds);
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Simulates the base and the corrected model on a test configuration and
/// compares their σ-normalized losses. Simulation failures are reported in
/// the result, with the improvement left undefined.
pub fn validate_final(
    final_model: &FinalModel,
    catalog: &ModelCatalog,
    test: &TimeSeriesDataset,
) -> Result<Validation, SessionError> {
    if test.role != Role::Test {
        return Err(SessionError::Invalid(format!("dataset `{}` is not a test dataset", test.id)));
    }
    let base = catalog.get(&final_model.base_model)?;
    test.check_model(&base)?;
    let corrected = final_model.build(catalog)?;
    let base_loss = test_loss(&base, test, final_model.dt);
    let final_loss = test_loss(&corrected, test, final_model.dt);
    let mut errors = Vec::new();
    if let Err(e) = &base_loss {
        errors.push(format!("base model: {e}"));
    }
    if let Err(e) = &final_loss {
        errors.push(format!("final model: {e}"));
    }
    let (loss_base, loss_final) = (base_loss.ok(), final_loss.ok());
    let rel_improvement = match (loss_base, loss_final) {
        (Some(b), Some(f)) if b > 0.0 => Some((b - f) / b),
        (Some(_), Some(_)) => {
            errors.push("base loss is zero".into());
            None
        }
        _ => None,
    };
    Ok(Validation {
        dataset: test.id.clone(),
        loss_base,
        loss_final,
        rel_improvement,
        error: (!errors.is_empty()).then(|| errors.join("; ")),
    })
}
