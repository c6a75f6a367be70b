//! Output masking and input sensitivity for a trained correction network.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TimeSeriesDataset;
use crate::nn::{self, MlpWeights};
use crate::training::{train, ExperimentRecord, TrainError, TrainingConfig};
use crate::ude::{simulate_augmented, AugmentedModel, UdeError};

pub const DEFAULT_TOLERANCE: f64 = 1.05;
pub const DEFAULT_TOP_M: usize = 7;
const RATIO_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReductionError {
    #[error(transparent)]
    Ude(#[from] UdeError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("no output count met the loss tolerance; the full mask is kept")]
    NoFeasibleK(Box<MaskReport>),
    #[error("invalid request: {0}")]
    Invalid(String),
}

/// Result of the iterative output-masking search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub ratios: Vec<f64>,
    /// Equation indices by descending ratio (ties by index).
    pub ordering: Vec<usize>,
    /// `(K, retrained final loss)` for every K tried.
    pub sweep: Vec<(usize, f64)>,
    pub chosen_k: usize,
    pub tolerance: f64,
    pub full_loss: f64,
    pub output_mask: Vec<bool>,
    /// Retrained record for `chosen_k`.
    pub record: ExperimentRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    /// Equation indices, one per row of `jac`.
    pub outputs: Vec<usize>,
    /// State indices, one per column of `jac`.
    pub inputs: Vec<usize>,
    /// Mean absolute Jacobian of the scaled correction w.r.t. physical inputs.
    pub jac: Vec<Vec<f64>>,
    /// State indices by descending column norm (ties by index).
    pub input_ranking: Vec<usize>,
    pub top_m: usize,
}

impl SensitivityReport {
    /// The first `top_m` ranked state indices.
    pub fn selected(&self) -> Vec<usize> {
        self.input_ranking.iter().take(self.top_m).copied().collect()
    }

    /// Heatmap table: one row per corrected equation, one column per input.
    pub fn heatmap_csv(&self, state_names: &[String]) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["output".to_string()];
        header.extend(self.inputs.iter().map(|&i| state_names[i].clone()));
        writer.write_record(&header).expect("in-memory write");
        for (row, &eq) in self.jac.iter().zip(&self.outputs) {
            let mut rec = vec![state_names[eq].clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            writer.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}

/// Indices sorted by descending `values`, ties by ascending index.
fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Mean that does not depend on sample order and is exact for constant
/// samples.
fn order_free_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let mut mean = 0.0;
    for (k, v) in values.iter().enumerate() {
        mean += (v - mean) / (k + 1) as f64;
    }
    mean
}

/// Augmented trajectories of every dataset, as saved states.
fn trajectory_states(
    aug: &AugmentedModel,
    theta: &[f64],
    datasets: &[TimeSeriesDataset],
) -> Result<Vec<Vec<f64>>, UdeError> {
    let mut states = Vec::new();
    for ds in datasets {
        let traj = simulate_augmented(aug, theta, &ds.config, &ds.times)?;
        states.extend(traj.states);
    }
    Ok(states)
}

/// Per-equation ratio of the largest correction to the largest augmented
/// derivative along the training trajectories.
pub fn output_significance(
    aug: &AugmentedModel,
    theta: &[f64],
    datasets: &[TimeSeriesDataset],
) -> Result<Vec<f64>, UdeError> {
    let nd = aug.base.n_diff();
    let mut max_corr = vec![0.0f64; nd];
    let mut max_deriv = vec![0.0f64; nd];
    for ds in datasets {
        let traj = simulate_augmented(aug, theta, &ds.config, &ds.times)?;
        for (k, u) in traj.states.iter().enumerate() {
            let corr = aug.correction(theta, u)?;
            let nx = aug.base.n_exogenous();
            let mut x = vec![0.0; nx];
            if nx > 0 {
                aug.base.exogenous(traj.times[k], &mut x);
            }
            let deriv = aug.derivative(theta, u, &x, &ds.config, traj.times[k])?;
            for i in 0..nd {
                max_corr[i] = max_corr[i].max(corr[i].abs());
                max_deriv[i] = max_deriv[i].max(deriv[i].abs());
            }
        }
    }
    Ok((0..nd)
        .map(|i| {
            if aug.output_mask[i] {
                max_corr[i] / max_deriv[i].max(RATIO_FLOOR)
            } else {
                0.0
            }
        })
        .collect())
}

/// Network parameters for a model restricted to a subset of its outputs:
/// the rows of the final layer belonging to dropped equations are removed,
/// so every kept equation receives exactly the same correction.
pub fn restrict_outputs(
    aug: &AugmentedModel,
    theta: &[f64],
    output_mask: &[bool],
) -> Result<(AugmentedModel, Vec<f64>), UdeError> {
    if output_mask.len() != aug.output_mask.len()
        || output_mask.iter().zip(&aug.output_mask).any(|(&new, &old)| new && !old)
    {
        return Err(UdeError::DimensionMismatch(
            "the new output mask must be a subset of the current one".into(),
        ));
    }
    let restricted = aug.with_output_mask(output_mask.to_vec())?;
    if !output_mask.iter().any(|&m| m) {
        return Ok((restricted, Vec::new()));
    }
    let keep: Vec<usize> = aug
        .output_indices()
        .iter()
        .enumerate()
        .filter_map(|(row, &eq)| output_mask[eq].then_some(row))
        .collect();
    let weights = MlpWeights::from_flat(&aug.spec, theta.to_vec())?;
    let last = weights.layout.layers.len() - 1;
    let mut out = Vec::with_capacity(restricted.n_params());
    for (li, shape) in weights.layout.layers.iter().enumerate() {
        let (w, b) = weights.layer(li);
        if li == last {
            for &row in &keep {
                out.extend_from_slice(&w[row * shape.fan_in..(row + 1) * shape.fan_in]);
            }
            out.extend(keep.iter().map(|&row| b[row]));
        } else {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
    }
    debug_assert_eq!(out.len(), restricted.n_params());
    Ok((restricted, out))
}

/// Retrains with the top-K outputs for K = 1, 2, ... and stops at the first
/// K whose loss is within `tolerance × full.final_loss`.
pub fn mask_search(
    aug: &AugmentedModel,
    full: &ExperimentRecord,
    datasets: &[TimeSeriesDataset],
    ratios: &[f64],
    cfg: &TrainingConfig,
    tolerance: f64,
) -> Result<MaskReport, ReductionError> {
    if ratios.len() != aug.base.n_diff() {
        return Err(ReductionError::Invalid(format!(
            "{} ratios for {} equations",
            ratios.len(),
            aug.base.n_diff()
        )));
    }
    if !(tolerance > 0.0) {
        return Err(ReductionError::Invalid("tolerance must be positive".into()));
    }
    let ordering = descending_order(ratios);
    let active: Vec<usize> = ordering.iter().copied().filter(|&i| aug.output_mask[i]).collect();
    let threshold = tolerance * full.final_loss;
    let mut sweep = Vec::new();
    let mut last = None;
    for k in 1..=active.len() {
        let mut mask = vec![false; aug.output_mask.len()];
        for &eq in &active[..k] {
            mask[eq] = true;
        }
        let record = if k == active.len() {
            // Same mask, spec and config as the full run, which is deterministic.
            full.clone()
        } else {
            train(&aug.with_output_mask(mask.clone())?, datasets, cfg)?
        };
        sweep.push((k, record.final_loss));
        let feasible = record.final_loss <= threshold;
        last = Some((k, mask, record));
        if feasible {
            let (chosen_k, output_mask, record) = last.unwrap();
            return Ok(MaskReport {
                ratios: ratios.to_vec(),
                ordering,
                sweep,
                chosen_k,
                tolerance,
                full_loss: full.final_loss,
                output_mask,
                record,
            });
        }
    }
    let (chosen_k, output_mask, record) = match last {
        Some(l) => l,
        None => (0, aug.output_mask.clone(), full.clone()),
    };
    Err(ReductionError::NoFeasibleK(Box::new(MaskReport {
        ratios: ratios.to_vec(),
        ordering,
        sweep,
        chosen_k,
        tolerance,
        full_loss: full.final_loss,
        output_mask,
        record,
    })))
}

/// Mean absolute input Jacobian of the scaled correction over every saved
/// sample of the training trajectories.
pub fn sensitivity(
    aug: &AugmentedModel,
    theta: &[f64],
    datasets: &[TimeSeriesDataset],
    top_m: usize,
) -> Result<SensitivityReport, UdeError> {
    let inputs = aug.input_indices();
    let outputs = aug.output_indices();
    let mut samples = vec![vec![Vec::new(); inputs.len()]; outputs.len()];
    if !outputs.is_empty() {
        let states = trajectory_states(aug, theta, datasets)?;
        let norm = &aug.normalizer;
        for u in &states {
            let z: Vec<f64> = inputs
                .iter()
                .map(|&i| (u[i] - norm.input_shift[i]) / norm.input_scale[i])
                .collect();
            let j_norm = nn::jacobian(&aug.spec, theta, &z)?;
            for (r, &eq) in outputs.iter().enumerate() {
                for (c, &i) in inputs.iter().enumerate() {
                    samples[r][c].push((norm.output_scale[eq] * j_norm[r][c] / norm.input_scale[i]).abs());
                }
            }
        }
    }
    let jac: Vec<Vec<f64>> = samples
        .into_iter()
        .map(|row| row.into_iter().map(order_free_mean).collect())
        .collect();
    let norms: Vec<f64> = (0..inputs.len())
        .map(|c| jac.iter().map(|row| row[c] * row[c]).sum::<f64>().sqrt())
        .collect();
    let input_ranking = descending_order(&norms).into_iter().map(|c| inputs[c]).collect();
    Ok(SensitivityReport {
        outputs,
        inputs,
        jac,
        input_ranking,
        top_m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, uniform_grid, Role};
    use crate::model::ModelCatalog;
    use crate::nn::{init_weights, MlpSpec, Normalizer};
    use crate::ude::loss;

    fn lv() -> (AugmentedModel, Vec<TimeSeriesDataset>) {
        let catalog = ModelCatalog::builtin();
        let full = catalog.get("lotka_volterra_full").unwrap();
        let trunc = catalog.get("lotka_volterra_truncated").unwrap();
        let grid = uniform_grid(0.0, 1.0, 11);
        let ds = generate_dataset(&full, "a", full.default_params(), &grid, 0.01, Role::Train).unwrap();
        let aug = AugmentedModel::full(trunc, &[3], Normalizer::identity(2, 2), 0.05).unwrap();
        (aug, vec![ds])
    }

    #[test]
    fn zero_final_layer_has_zero_ratios() {
        let (aug, data) = lv();
        let theta = init_weights(&aug.spec).theta;
        assert_eq!(output_significance(&aug, &theta, &data).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn ordering_breaks_ties_by_index() {
        assert_eq!(descending_order(&[0.1, 0.5, 0.1, 0.5]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn restriction_to_all_outputs_is_identity() {
        let (aug, data) = lv();
        let theta: Vec<f64> = (0..aug.n_params()).map(|i| 0.05 * (i as f64).sin()).collect();
        let (same, th) = restrict_outputs(&aug, &theta, &[true, true]).unwrap();
        assert_eq!(th, theta);
        assert_eq!(loss(&same, &th, &data).unwrap(), loss(&aug, &theta, &data).unwrap());
    }

    #[test]
    fn restriction_keeps_corrections_of_kept_outputs() {
        let (aug, _) = lv();
        let theta: Vec<f64> = (0..aug.n_params()).map(|i| 0.1 * (i as f64 + 1.0).cos()).collect();
        let (only_y, th) = restrict_outputs(&aug, &theta, &[false, true]).unwrap();
        let u = [0.3, 1.2];
        let a = aug.correction(&theta, &u).unwrap();
        let b = only_y.correction(&th, &u).unwrap();
        assert_eq!(b, vec![0.0, a[1]]);
        assert!(restrict_outputs(&only_y, &th, &[true, true]).is_err());
    }

    #[test]
    fn linear_net_with_identity_normalizer_gives_abs_weights() {
        let (aug, data) = lv();
        let spec = MlpSpec::new(2, &[], 2);
        let aug = aug.with_architecture(&[], &spec).unwrap();
        // W = [[0.2, -0.3], [0.0, 0.1]], b = 0.
        let theta = vec![0.2, -0.3, 0.0, 0.1, 0.0, 0.0];
        let rep = sensitivity(&aug, &theta, &data, 7).unwrap();
        assert_eq!(rep.jac, vec![vec![0.2, 0.3], vec![0.0, 0.1]]);
        assert_eq!(rep.input_ranking, vec![1, 0]);
        assert_eq!(rep.selected(), vec![1, 0]);
        let csv = rep.heatmap_csv(&["x".into(), "y".into()]);
        assert_eq!(csv, "output,x,y\nx,0.2,0.3\ny,0,0.1\n");
    }

    #[test]
    fn ignored_input_ranks_last_with_zero_column() {
        let (aug, data) = lv();
        let spec = MlpSpec::new(2, &[], 2);
        let aug = aug.with_architecture(&[], &spec).unwrap();
        let theta = vec![0.0, 0.4, 0.0, -0.2, 0.1, 0.1];
        let rep = sensitivity(&aug, &theta, &data, 1).unwrap();
        assert!(rep.jac.iter().all(|row| row[0] == 0.0));
        assert_eq!(rep.input_ranking, vec![1, 0]);
        assert_eq!(rep.selected(), vec![1]);
    }

    #[test]
    fn infinite_tolerance_chooses_one_output() {
        let (aug, data) = lv();
        let cfg = TrainingConfig {
            max_iters: 3,
            ..TrainingConfig::default()
        };
        let full = train(&aug, &data, &cfg).unwrap();
        let rep = mask_search(&aug, &full, &data, &[0.2, 0.7], &cfg, f64::INFINITY).unwrap();
        assert_eq!(rep.chosen_k, 1);
        assert_eq!(rep.ordering, vec![1, 0]);
        assert_eq!(rep.output_mask, vec![false, true]);
        assert_eq!(rep.sweep.len(), 1);
    }

    #[test]
    fn unreachable_tolerance_reports_full_mask() {
        let (aug, data) = lv();
        let cfg = TrainingConfig {
            max_iters: 3,
            ..TrainingConfig::default()
        };
        let full = train(&aug, &data, &cfg).unwrap();
        match mask_search(&aug, &full, &data, &[0.2, 0.7], &cfg, 1e-9) {
            Err(ReductionError::NoFeasibleK(rep)) => {
                assert_eq!(rep.chosen_k, 2);
                assert_eq!(rep.output_mask, vec![true, true]);
                assert_eq!(rep.sweep.len(), 2);
                assert_eq!(rep.sweep[1].1, full.final_loss);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
