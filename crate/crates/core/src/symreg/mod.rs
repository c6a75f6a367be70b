//! Symbolic regression of the network's corrections.
//!
//! Each corrected equation gets its own genetic-programming search over
//! `+ - * / neg`, producing a complexity/mse Pareto front from which one
//! expression is picked (knee point by default, or by the engineer).

mod expr;
mod front;
mod gp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TimeSeriesDataset;
use crate::ude::{simulate_augmented, AugmentedModel, UdeError};

pub use expr::{evaluate_expression, fold_constants, subtree_end, Expr, Node, DIV_GUARD};
pub use front::{select_expression, FrontEntry, ParetoFront, Strategy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymRegError {
    #[error("unresolved reference `{0}`")]
    UnresolvedReference(String),
    #[error("cannot parse expression: {0}")]
    Parse(String),
    #[error("the Pareto front is empty")]
    EmptyFront,
    #[error("no engineer decision is pending")]
    NoPendingDecision,
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Ude(#[from] UdeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymRegConfig {
    pub population: usize,
    pub generations: usize,
    pub tournament: usize,
    pub crossover: f64,
    pub mutation: f64,
    pub max_complexity: usize,
    pub parsimony: f64,
    /// Random constants are drawn from `[-const_range, const_range]`.
    pub const_range: f64,
    /// Nelder-Mead iterations spent on each new front member.
    pub nm_steps: usize,
    /// The search ends once the front reaches this mse and has then stayed
    /// unchanged for `stop_patience` generations.
    pub stop_mse: f64,
    pub stop_patience: usize,
    pub seed: u64,
}

impl Default for SymRegConfig {
    fn default() -> Self {
        SymRegConfig {
            population: 500,
            generations: 200,
            tournament: 5,
            crossover: 0.7,
            mutation: 0.25,
            max_complexity: 25,
            parsimony: 1e-4,
            const_range: 2.0,
            nm_steps: 50,
            stop_mse: 1e-16,
            stop_patience: 20,
            seed: 0,
        }
    }
}

impl SymRegConfig {
    pub fn validate(&self) -> Result<(), SymRegError> {
        let bad = |m: &str| Err(SymRegError::Invalid(m.to_string()));
        if self.population < 2 || self.tournament == 0 {
            return bad("population must be at least 2 and tournament at least 1");
        }
        if self.max_complexity == 0 {
            return bad("max_complexity must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.crossover)
            || !(0.0..=1.0).contains(&self.mutation)
            || self.crossover + self.mutation > 1.0
        {
            return bad("crossover and mutation are probabilities summing to at most 1");
        }
        if !(self.const_range > 0.0) || !(self.parsimony >= 0.0) {
            return bad("const_range must be positive and parsimony non-negative");
        }
        Ok(())
    }
}

/// Inputs and targets for the search, stored by column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTable {
    pub columns: Vec<String>,
    /// `n_columns × n_rows`
    pub inputs: Vec<Vec<f64>>,
    pub target_names: Vec<String>,
    /// `n_targets × n_rows`
    pub targets: Vec<Vec<f64>>,
    /// Dataset id of every row.
    pub row_dataset: Vec<String>,
}

impl RegressionTable {
    pub fn n_rows(&self) -> usize {
        self.row_dataset.len()
    }

    pub fn validate(&self) -> Result<(), SymRegError> {
        let n = self.n_rows();
        if n == 0 {
            return Err(SymRegError::Invalid("the table has no rows".into()));
        }
        if self.inputs.len() != self.columns.len() || self.targets.len() != self.target_names.len() {
            return Err(SymRegError::Invalid("names and columns disagree".into()));
        }
        let all = self.inputs.iter().chain(&self.targets);
        for col in all {
            if col.len() != n {
                return Err(SymRegError::Invalid("ragged table".into()));
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(SymRegError::Invalid("table holds non-finite values".into()));
            }
        }
        Ok(())
    }

    /// Rows belonging to the given datasets.
    pub fn subset(&self, datasets: &[&str]) -> RegressionTable {
        let keep: Vec<usize> = (0..self.n_rows())
            .filter(|&r| datasets.contains(&self.row_dataset[r].as_str()))
            .collect();
        let pick = |col: &Vec<f64>| keep.iter().map(|&r| col[r]).collect::<Vec<f64>>();
        RegressionTable {
            columns: self.columns.clone(),
            inputs: self.inputs.iter().map(pick).collect(),
            target_names: self.target_names.clone(),
            targets: self.targets.iter().map(pick).collect(),
            row_dataset: keep.iter().map(|&r| self.row_dataset[r].clone()).collect(),
        }
    }

    /// Mean squared error of `expr` against target `k`.
    pub fn mse(&self, expr: &Expr, k: usize) -> Result<f64, SymRegError> {
        let pred = expr.evaluate_columns(&self.columns, &self.inputs)?;
        let target = &self.targets[k];
        let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
        let mse = sum / target.len() as f64;
        Ok(if mse.is_finite() { mse } else { f64::INFINITY })
    }
}

/// One row per saved sample of every dataset: the selected states (physical
/// units) and parameters as inputs, the scaled corrections of the masked
/// equations as targets.
pub fn build_regression_table(
    aug: &AugmentedModel,
    theta: &[f64],
    datasets: &[TimeSeriesDataset],
    selected_inputs: &[usize],
    selected_params: &[usize],
) -> Result<RegressionTable, SymRegError> {
    let model = &aug.base;
    if let Some(&i) = selected_inputs.iter().find(|&&i| i >= model.n_states()) {
        return Err(SymRegError::Invalid(format!("state index {i} out of range")));
    }
    if let Some(&i) = selected_params.iter().find(|&&i| i >= model.params().len()) {
        return Err(SymRegError::Invalid(format!("parameter index {i} out of range")));
    }
    let outputs = aug.output_indices();
    let state_names = model.state_names();
    let mut columns: Vec<String> = selected_inputs.iter().map(|&i| state_names[i].clone()).collect();
    columns.extend(selected_params.iter().map(|&i| model.params()[i].name.clone()));
    let mut inputs = vec![Vec::new(); columns.len()];
    let mut targets = vec![Vec::new(); outputs.len()];
    let mut row_dataset = Vec::new();
    for ds in datasets {
        let traj = simulate_augmented(aug, theta, &ds.config, &ds.times)?;
        for u in &traj.states {
            let corr = aug.correction(theta, u)?;
            for (c, &i) in selected_inputs.iter().enumerate() {
                inputs[c].push(u[i]);
            }
            for (c, &i) in selected_params.iter().enumerate() {
                inputs[selected_inputs.len() + c].push(ds.config[i]);
            }
            for (k, &eq) in outputs.iter().enumerate() {
                targets[k].push(corr[eq]);
            }
            row_dataset.push(ds.id.clone());
        }
    }
    let table = RegressionTable {
        columns,
        inputs,
        target_names: outputs.iter().map(|&eq| state_names[eq].clone()).collect(),
        targets,
        row_dataset,
    };
    table.validate()?;
    Ok(table)
}

/// One Pareto front per target, each from its own random stream.
pub fn evolve(table: &RegressionTable, cfg: &SymRegConfig) -> Result<Vec<ParetoFront>, SymRegError> {
    cfg.validate()?;
    table.validate()?;
    let columns: Vec<&[f64]> = table.inputs.iter().map(Vec::as_slice).collect();
    Ok(table
        .targets
        .iter()
        .enumerate()
        .map(|(k, target)| gp::search(&columns, &table.columns, target, cfg, k as u64))
        .collect())
}

/// Front search for a single target over named columns.
pub fn evolve_columns(
    names: &[String],
    columns: &[Vec<f64>],
    target: &[f64],
    cfg: &SymRegConfig,
) -> Result<ParetoFront, SymRegError> {
    cfg.validate()?;
    if target.is_empty() || columns.iter().any(|c| c.len() != target.len()) || names.len() != columns.len() {
        return Err(SymRegError::Invalid("columns and target must share a non-zero length".into()));
    }
    let cols: Vec<&[f64]> = columns.iter().map(Vec::as_slice).collect();
    Ok(gp::search(&cols, names, target, cfg, 0))
}
