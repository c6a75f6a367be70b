//! Neural augmentation of a dynamical model and its calibration objective.
//!
//! The augmented right-hand side is
//!
//! ```text
//! du_d/dt = f(u, x, p, t) + S_out · diag(s) · NN((select(u) - shift) / scale; θ)
//! ```
//!
//! where `select` applies the input mask and `S_out` scatters the network
//! outputs onto the equations selected by the output mask. The loss gradient is
//! the exact derivative of the discrete RK4 loss, computed by a reverse sweep
//! over every stage of the recorded forward pass.

use std::cell::RefCell;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TimeSeriesDataset;
use crate::model::solver::{self, central_jacobian, plan_steps, Tape, VectorField};
use crate::model::{DynamicalModel, SimError, Trajectory};
use crate::nn::{Mlp, MlpSpec, NnError, Normalizer, Workspace, SCALE_FLOOR};

/// Base value of the loss assigned to a diverged simulation.
pub const DIVERGENCE_PENALTY: f64 = 1e6;
/// Central-difference step used to differentiate `f`, `g` and `h`.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UdeError {
    #[error(transparent)]
    Network(#[from] NnError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Simulation(#[from] SimError),
}

/// A base model plus a masked, normalized neural correction.
///
/// The normalizer always covers every state (inputs) and every differential
/// equation (outputs); the masks pick the entries the network actually uses.
#[derive(Debug, Clone)]
pub struct AugmentedModel {
    pub base: Arc<DynamicalModel>,
    pub spec: MlpSpec,
    pub normalizer: Normalizer,
    pub input_mask: Vec<bool>,
    pub output_mask: Vec<bool>,
    /// RK4 step used for every simulation of this model.
    pub dt: f64,
}

fn indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

impl AugmentedModel {
    pub fn new(
        base: Arc<DynamicalModel>,
        spec: MlpSpec,
        normalizer: Normalizer,
        input_mask: Vec<bool>,
        output_mask: Vec<bool>,
        dt: f64,
    ) -> Result<Self, UdeError> {
        let aug = AugmentedModel {
            base,
            spec,
            normalizer,
            input_mask,
            output_mask,
            dt,
        };
        aug.validate()?;
        Ok(aug)
    }

    /// Network over all states correcting every differential equation.
    pub fn full(
        base: Arc<DynamicalModel>,
        hidden: &[usize],
        normalizer: Normalizer,
        dt: f64,
    ) -> Result<Self, UdeError> {
        let (ns, nd) = (base.n_states(), base.n_diff());
        Self::new(
            base,
            MlpSpec::new(ns, hidden, nd),
            normalizer,
            vec![true; ns],
            vec![true; nd],
            dt,
        )
    }

    pub fn validate(&self) -> Result<(), UdeError> {
        let mismatch = |msg: String| Err(UdeError::DimensionMismatch(msg));
        let (ns, nd) = (self.base.n_states(), self.base.n_diff());
        if self.input_mask.len() != ns {
            return mismatch(format!("input mask has {} entries, model has {ns} states", self.input_mask.len()));
        }
        if self.output_mask.len() != nd {
            return mismatch(format!(
                "output mask has {} entries, model has {nd} differential equations",
                self.output_mask.len()
            ));
        }
        if self.normalizer.input_shift.len() != ns
            || self.normalizer.input_scale.len() != ns
            || self.normalizer.output_scale.len() != nd
        {
            return mismatch("normalizer does not cover every state and equation".into());
        }
        if !(self.dt > 0.0) {
            return mismatch(format!("dt must be positive, got {}", self.dt));
        }
        let n_out = self.output_mask.iter().filter(|&&m| m).count();
        if n_out == 0 {
            // Nothing is corrected; the network is never evaluated.
            return Ok(());
        }
        self.spec.validate()?;
        let n_in = self.input_mask.iter().filter(|&&m| m).count();
        if self.spec.input_dim != n_in || self.spec.output_dim != n_out {
            return mismatch(format!(
                "network is {}→{}, masks select {n_in}→{n_out}",
                self.spec.input_dim, self.spec.output_dim
            ));
        }
        Ok(())
    }

    pub fn input_indices(&self) -> Vec<usize> {
        indices(&self.input_mask)
    }

    pub fn output_indices(&self) -> Vec<usize> {
        indices(&self.output_mask)
    }

    pub fn n_params(&self) -> usize {
        self.spec.n_params()
    }

    /// Same model with a new output mask and a network resized to match.
    pub fn with_output_mask(&self, output_mask: Vec<bool>) -> Result<Self, UdeError> {
        let mut spec = self.spec.clone();
        spec.output_dim = output_mask.iter().filter(|&&m| m).count();
        Self::new(
            self.base.clone(),
            spec,
            self.normalizer.clone(),
            self.input_mask.clone(),
            output_mask,
            self.dt,
        )
    }

    /// Same masks and normalizer with a different network spec (dims kept).
    pub fn with_architecture(&self, hidden: &[usize], spec: &MlpSpec) -> Result<Self, UdeError> {
        let mut s = spec.clone();
        s.hidden = hidden.to_vec();
        s.input_dim = self.spec.input_dim;
        s.output_dim = self.spec.output_dim;
        Self::new(
            self.base.clone(),
            s,
            self.normalizer.clone(),
            self.input_mask.clone(),
            self.output_mask.clone(),
            self.dt,
        )
    }

    fn network<'a>(&self, theta: &'a [f64]) -> Result<Option<Mlp<'a>>, UdeError> {
        if self.output_mask.iter().any(|&m| m) {
            Ok(Some(Mlp::new(&self.spec, theta)?))
        } else {
            Ok(None)
        }
    }

    /// Scaled correction `Δd` over all differential equations at state `u`.
    pub fn correction(&self, theta: &[f64], u: &[f64]) -> Result<Vec<f64>, UdeError> {
        let field = AugmentedField::new(self, theta, &[])?;
        let mut out = vec![0.0; self.base.n_diff()];
        field.add_correction(u, &mut out);
        Ok(out)
    }

    /// Augmented derivative `f + Δd` at a single point.
    pub fn derivative(
        &self,
        theta: &[f64],
        u: &[f64],
        x: &[f64],
        p: &[f64],
        t: f64,
    ) -> Result<Vec<f64>, UdeError> {
        let field = AugmentedField::new(self, theta, p)?;
        let mut out = vec![0.0; self.base.n_diff()];
        field.eval(u, x, t, &mut out);
        Ok(out)
    }
}

pub(crate) struct AugmentedField<'a> {
    aug: &'a AugmentedModel,
    p: &'a [f64],
    mlp: Option<Mlp<'a>>,
    inputs: Vec<usize>,
    outputs: Vec<usize>,
    scratch: RefCell<(Workspace, Vec<f64>)>,
}

impl<'a> AugmentedField<'a> {
    pub(crate) fn new(
        aug: &'a AugmentedModel,
        theta: &'a [f64],
        p: &'a [f64],
    ) -> Result<Self, UdeError> {
        let mlp = aug.network(theta)?;
        let inputs = aug.input_indices();
        Ok(AugmentedField {
            aug,
            p,
            mlp,
            scratch: RefCell::new((Workspace::new(&aug.spec), vec![0.0; inputs.len()])),
            inputs,
            outputs: aug.output_indices(),
        })
    }

    fn normalized_input(&self, u: &[f64], buf: &mut [f64]) {
        let norm = &self.aug.normalizer;
        for (b, &i) in buf.iter_mut().zip(&self.inputs) {
            *b = (u[i] - norm.input_shift[i]) / norm.input_scale[i];
        }
    }

    pub(crate) fn add_correction(&self, u: &[f64], du: &mut [f64]) {
        let Some(mlp) = &self.mlp else { return };
        let mut guard = self.scratch.borrow_mut();
        let (ws, buf) = &mut *guard;
        self.normalized_input(u, buf);
        let out = mlp.forward_into(buf, ws);
        let scale = &self.aug.normalizer.output_scale;
        for (k, &eq) in self.outputs.iter().enumerate() {
            du[eq] += scale[eq] * out[k];
        }
    }

    /// Adds `κᵀ ∂Δd/∂θ` into `grad_theta` and `κᵀ ∂Δd/∂u` into `grad_u`.
    fn correction_vjp(&self, u: &[f64], kappa: &[f64], grad_theta: &mut [f64], grad_u: &mut [f64]) {
        let Some(mlp) = &self.mlp else { return };
        let mut guard = self.scratch.borrow_mut();
        let (ws, buf) = &mut *guard;
        self.normalized_input(u, buf);
        mlp.forward_into(buf, ws);
        let scale = &self.aug.normalizer.output_scale;
        let cot: Vec<f64> = self.outputs.iter().map(|&eq| kappa[eq] * scale[eq]).collect();
        let mut grad_in = vec![0.0; self.inputs.len()];
        mlp.backward(ws, &cot, grad_theta, &mut grad_in);
        let in_scale = &self.aug.normalizer.input_scale;
        for (g, &i) in grad_in.iter().zip(&self.inputs) {
            grad_u[i] += g / in_scale[i];
        }
    }
}

impl VectorField for AugmentedField<'_> {
    fn eval(&self, u: &[f64], x: &[f64], t: f64, du: &mut [f64]) {
        self.aug.base.rhs(u, x, self.p, t, du);
        self.add_correction(u, du);
    }
}

/// Simulates the augmented model on `grid` (first and last instants bound the
/// time span).
pub fn simulate_augmented(
    aug: &AugmentedModel,
    theta: &[f64],
    p: &[f64],
    grid: &[f64],
) -> Result<Trajectory, UdeError> {
    aug.validate()?;
    if grid.is_empty() {
        return Err(UdeError::DimensionMismatch("empty time grid".into()));
    }
    if p.len() != aug.base.params().len() {
        return Err(UdeError::DimensionMismatch(format!(
            "expected {} parameters, got {}",
            aug.base.params().len(),
            p.len()
        )));
    }
    let field = AugmentedField::new(aug, theta, p)?;
    let plan = plan_steps((grid[0], *grid.last().unwrap()), aug.dt, grid)?;
    Ok(solver::integrate(&aug.base, p, &field, &plan, None)?)
}

/// Value of the calibration objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub value: f64,
    /// Per output channel, averaged over datasets.
    pub per_output: Vec<f64>,
    pub n_points: usize,
    /// Number of datasets whose simulation diverged.
    pub diverged: usize,
}

impl Residual {
    pub fn is_diverged(&self) -> bool {
        self.diverged > 0
    }
}

/// σ-normalized squared error of `outputs` against the dataset, per channel.
pub fn channel_errors(outputs: &[Vec<f64>], ds: &TimeSeriesDataset) -> Vec<f64> {
    let sigma: Vec<f64> = ds.channel_std().iter().map(|s| s.max(SCALE_FLOOR)).collect();
    let n = ds.times.len() as f64;
    (0..ds.n_outputs())
        .map(|c| {
            outputs
                .iter()
                .zip(&ds.outputs)
                .map(|(yh, y)| ((yh[c] - y[c]) / sigma[c]).powi(2))
                .sum::<f64>()
                / n
        })
        .collect()
}

/// Penalty for a simulation that failed at `t_fail`: finite and lower the
/// longer the simulation survived.
pub fn divergence_penalty(ds: &TimeSeriesDataset, t_fail: f64) -> f64 {
    let (t0, t1) = ds.t_span();
    DIVERGENCE_PENALTY + (t1 - t_fail.clamp(t0, t1))
}

struct DatasetLoss {
    per_output: Vec<f64>,
    diverged: bool,
}

fn check_datasets(aug: &AugmentedModel, theta: &[f64], datasets: &[TimeSeriesDataset]) -> Result<(), UdeError> {
    aug.validate()?;
    if datasets.is_empty() {
        return Err(UdeError::DimensionMismatch("no datasets".into()));
    }
    if aug.network(theta)?.is_some() && theta.len() != aug.n_params() {
        return Err(UdeError::DimensionMismatch("theta length".into()));
    }
    for ds in datasets {
        if ds.n_outputs() != aug.base.n_outputs() {
            return Err(UdeError::DimensionMismatch(format!(
                "dataset `{}` has {} outputs, model has {}",
                ds.id,
                ds.n_outputs(),
                aug.base.n_outputs()
            )));
        }
        if ds.config.len() != aug.base.params().len() {
            return Err(UdeError::DimensionMismatch(format!(
                "dataset `{}` config has {} values, model has {} parameters",
                ds.id,
                ds.config.len(),
                aug.base.params().len()
            )));
        }
    }
    Ok(())
}

fn failure_time(err: &SimError) -> Option<f64> {
    match err {
        SimError::NonFiniteState { t } | SimError::AlgebraicSolveFailed { t, .. } => Some(*t),
        SimError::InvalidRequest(_) => None,
    }
}

fn dataset_loss(
    aug: &AugmentedModel,
    theta: &[f64],
    ds: &TimeSeriesDataset,
) -> Result<DatasetLoss, UdeError> {
    match simulate_augmented(aug, theta, &ds.config, &ds.times) {
        Ok(traj) => Ok(DatasetLoss {
            per_output: channel_errors(&traj.outputs, ds),
            diverged: false,
        }),
        Err(UdeError::Simulation(e)) => match failure_time(&e) {
            Some(t) => Ok(DatasetLoss {
                per_output: vec![divergence_penalty(ds, t); ds.n_outputs()],
                diverged: true,
            }),
            None => Err(UdeError::Simulation(e)),
        },
        Err(e) => Err(e),
    }
}

fn reduce(parts: &[DatasetLoss], datasets: &[TimeSeriesDataset]) -> Residual {
    let n_out = datasets[0].n_outputs();
    let mut per_output = vec![0.0; n_out];
    for part in parts {
        for (acc, v) in per_output.iter_mut().zip(&part.per_output) {
            *acc += v;
        }
    }
    let nd = parts.len() as f64;
    per_output.iter_mut().for_each(|v| *v /= nd);
    Residual {
        value: per_output.iter().sum::<f64>() / n_out as f64,
        per_output,
        n_points: datasets.iter().map(|d| d.times.len()).sum(),
        diverged: parts.iter().filter(|p| p.diverged).count(),
    }
}

/// Mean over datasets of the σ-normalized mean squared output error.
pub fn loss(
    aug: &AugmentedModel,
    theta: &[f64],
    datasets: &[TimeSeriesDataset],
) -> Result<Residual, UdeError> {
    check_datasets(aug, theta, datasets)?;
    let parts = datasets
        .par_iter()
        .map(|ds| dataset_loss(aug, theta, ds))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(reduce(&parts, datasets))
}

/// `∂r/∂θ` of [`loss`].
pub fn loss_gradient(
    aug: &AugmentedModel,
    theta: &[f64],
    datasets: &[TimeSeriesDataset],
) -> Result<Vec<f64>, UdeError> {
    loss_and_gradient(aug, theta, datasets).map(|(_, g)| g)
}

/// Loss and its exact discrete gradient from one forward and one reverse pass
/// per dataset. Diverged datasets contribute their penalty and zero gradient.
pub fn loss_and_gradient(
    aug: &AugmentedModel,
    theta: &[f64],
    datasets: &[TimeSeriesDataset],
) -> Result<(Residual, Vec<f64>), UdeError> {
    check_datasets(aug, theta, datasets)?;
    let weight = 1.0 / datasets.len() as f64;
    let parts = datasets
        .par_iter()
        .map(|ds| dataset_adjoint(aug, theta, ds, weight))
        .collect::<Result<Vec<_>, _>>()?;
    let mut grad = vec![0.0; theta.len()];
    let mut losses = Vec::with_capacity(parts.len());
    for (part, g) in parts {
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
        losses.push(part);
    }
    Ok((reduce(&losses, datasets), grad))
}

/// Linearization of the algebraic states: `du_a/du_d = -g_a⁻¹ g_d`, applied
/// transposed to pull a full-state cotangent back onto the differential states.
struct AlgebraicPullback<'a> {
    model: &'a DynamicalModel,
    p: &'a [f64],
}

impl AlgebraicPullback<'_> {
    /// Returns `w_d + (du_a/du_d)ᵀ w_a`.
    fn apply(&self, u: &[f64], x: &[f64], t: f64, w: &[f64]) -> Vec<f64> {
        let nd = self.model.n_diff();
        let na = self.model.n_alg();
        let mut out = w[..nd].to_vec();
        if na == 0 || w[nd..].iter().all(|&v| v == 0.0) {
            return out;
        }
        let ns = nd + na;
        let jac = central_jacobian(u, na, FD_STEP, |uu, g| {
            self.model.alg_residual(uu, x, self.p, t, g)
        });
        let g_a = DMatrix::from_fn(na, na, |i, j| jac[i * ns + nd + j]);
        let rhs = DVector::from_column_slice(&w[nd..]);
        // Singular blocks cannot occur for models that passed validation at a
        // consistent state; fall back to ignoring the algebraic path if they do.
        let Some(v) = g_a.transpose().lu().solve(&rhs) else {
            return out;
        };
        for (j, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in 0..na {
                s += jac[i * ns + j] * v[i];
            }
            *o -= s;
        }
        out
    }
}

fn dataset_adjoint(
    aug: &AugmentedModel,
    theta: &[f64],
    ds: &TimeSeriesDataset,
    weight: f64,
) -> Result<(DatasetLoss, Vec<f64>), UdeError> {
    let model = aug.base.as_ref();
    let p = ds.config.as_slice();
    let (nd, ns, ny, nx) = (model.n_diff(), model.n_states(), model.n_outputs(), model.n_exogenous());
    let field = AugmentedField::new(aug, theta, p)?;
    let plan = plan_steps(ds.t_span(), aug.dt, &ds.times)?;
    let mut tape = Tape::default();
    let traj = match solver::integrate(model, p, &field, &plan, Some(&mut tape)) {
        Ok(traj) => traj,
        Err(e) => {
            return match failure_time(&e) {
                Some(t) => Ok((
                    DatasetLoss {
                        per_output: vec![divergence_penalty(ds, t); ny],
                        diverged: true,
                    },
                    vec![0.0; theta.len()],
                )),
                None => Err(e.into()),
            }
        }
    };
    let per_output = channel_errors(&traj.outputs, ds);
    let mut grad = vec![0.0; theta.len()];
    if field.mlp.is_none() {
        return Ok((DatasetLoss { per_output, diverged: false }, grad));
    }

    let pullback = AlgebraicPullback { model, p };
    let sigma: Vec<f64> = ds.channel_std().iter().map(|s| s.max(SCALE_FLOOR)).collect();
    let n_samples = ds.times.len() as f64;
    let mut x = vec![0.0; nx];

    // Cotangent of the loss with respect to the differential state at each
    // save instant.
    let projection: Option<Vec<usize>> = model.observed_states().iter().copied().collect();
    let save_cotangent = |k: usize, x: &mut Vec<f64>| -> Vec<f64> {
        let t = traj.times[k];
        let u = &traj.states[k];
        let gy: Vec<f64> = (0..ny)
            .map(|c| {
                2.0 * weight / (ny as f64 * n_samples * sigma[c] * sigma[c])
                    * (traj.outputs[k][c] - ds.outputs[k][c])
            })
            .collect();
        let mut gu = vec![0.0; ns];
        model.exogenous(t, x);
        match &projection {
            Some(idx) => {
                for (c, &i) in idx.iter().enumerate() {
                    gu[i] += gy[c];
                }
            }
            None => {
                let jac = central_jacobian(u, ny, FD_STEP, |uu, y| model.output(uu, x, p, t, y));
                for c in 0..ny {
                    for j in 0..ns {
                        gu[j] += jac[c * ns + j] * gy[c];
                    }
                }
            }
        }
        pullback.apply(u, x, t, &gu)
    };

    // κᵀ ∂F/∂u_d at a stage, accumulating the θ part into `grad`.
    let stage_vjp = |u: &[f64], t: f64, kappa: &[f64], grad: &mut [f64], x: &mut Vec<f64>| -> Vec<f64> {
        model.exogenous(t, x);
        let jf = central_jacobian(u, nd, FD_STEP, |uu, du| model.rhs(uu, x, p, t, du));
        let mut w = vec![0.0; ns];
        for i in 0..nd {
            let ki = kappa[i];
            if ki != 0.0 {
                for j in 0..ns {
                    w[j] += jf[i * ns + j] * ki;
                }
            }
        }
        field.correction_vjp(u, kappa, grad, &mut w);
        pullback.apply(u, x, t, &w)
    };

    let mut lambda = vec![0.0; nd];
    let mut kappa = vec![0.0; nd];
    for (step, record) in plan.steps.iter().zip(&tape.steps).rev() {
        if let Some(k) = step.save {
            let c = save_cotangent(k, &mut x);
            for (l, v) in lambda.iter_mut().zip(&c) {
                *l += v;
            }
        }
        let h = step.h;
        let times = [step.t, step.t + 0.5 * h, step.t + 0.5 * h, step.t + h];
        // Weight of each stage slope in the update, and the coefficient by
        // which stage j's input depends on slope j-1.
        let b = [h / 6.0, h / 3.0, h / 3.0, h / 6.0];
        let a = [0.0, 0.5 * h, 0.5 * h, h];
        let mut lambda_next = lambda.clone();
        let mut carry = vec![0.0; nd];
        for j in (0..4).rev() {
            for i in 0..nd {
                kappa[i] = b[j] * lambda[i] + carry[i];
            }
            let g = stage_vjp(&record.stages[j], times[j], &kappa, &mut grad, &mut x);
            for i in 0..nd {
                lambda_next[i] += g[i];
                carry[i] = a[j] * g[i];
            }
        }
        lambda = lambda_next;
    }
    Ok((DatasetLoss { per_output, diverged: false }, grad))
}

/// Central-difference time derivative of sampled series (one-sided at the
/// ends). `rows` is `n_times × n_channels`.
pub fn sampled_derivative(times: &[f64], rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = times.len();
    (0..n)
        .map(|i| {
            let (a, b) = match i {
                0 => (0, 1),
                _ if i + 1 == n => (n - 2, n - 1),
                _ => (i - 1, i + 1),
            };
            let dt = times[b] - times[a];
            rows[a].iter().zip(&rows[b]).map(|(ya, yb)| (yb - ya) / dt).collect()
        })
        .collect()
}

/// Fits the correction normalizer on a reference trajectory per training
/// dataset: measured values for states the outputs observe directly, and the
/// base model's simulation for the rest. Output scales come from the same
/// reference (finite differences of the measurements, or the base model's
/// derivatives).
pub fn fit_reference_normalizer(
    model: &DynamicalModel,
    datasets: &[TimeSeriesDataset],
    dt: f64,
) -> Result<Normalizer, UdeError> {
    let mut samples = Vec::new();
    let mut derivatives = Vec::new();
    for ds in datasets {
        let traj = crate::model::simulate(model, &ds.config, ds.t_span(), dt, &ds.times)?;
        let measured = sampled_derivative(&ds.times, &ds.outputs);
        for k in 0..ds.times.len() {
            let mut u = traj.states[k].clone();
            let mut du = traj.derivatives[k].clone();
            for (c, obs) in model.observed_states().iter().enumerate() {
                if let Some(i) = *obs {
                    u[i] = ds.outputs[k][c];
                    if i < du.len() {
                        du[i] = measured[k][c];
                    }
                }
            }
            samples.push(u);
            derivatives.push(du);
        }
    }
    Ok(crate::nn::fit_normalizer(&samples, &derivatives)?)
}
