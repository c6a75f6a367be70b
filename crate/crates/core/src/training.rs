//! Adam calibration of the correction network and multi-architecture sweeps.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::data::{Role, TimeSeriesDataset};
use crate::nn::{init_weights, Activation, MlpSpec};
use crate::ude::{loss, loss_and_gradient, AugmentedModel, UdeError, DIVERGENCE_PENALTY};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("no training datasets")]
    NoData,
    #[error(transparent)]
    Ude(#[from] UdeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub optimizer: AdamConfig,
    pub max_iters: usize,
    /// Iterations without a new best loss before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Optional horizon warm-up and low-rate polish around the main run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Schedule>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            optimizer: AdamConfig::default(),
            max_iters: 2000,
            patience: 200,
            seed: 0,
            schedule: None,
        }
    }
}

/// Extra phases around the main Adam run.
///
/// Warm-up trains on growing prefixes of every dataset (each entry is the
/// fraction of samples kept) so the network first fits the short-horizon
/// dynamics, where single shooting is well conditioned. The polish phase
/// restarts Adam from the best iterate at `polish_lr`. Only full-horizon
/// losses enter the record's history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_fractions: Vec<f64>,
    pub warmup_iters: usize,
    pub polish_lr: f64,
    pub polish_iters: usize,
}

impl Schedule {
    /// Warm-up on the first quarter, half and three quarters of each series,
    /// then polish at a tenth of `lr`.
    pub fn horizon_warmup(lr: f64) -> Self {
        Schedule {
            warmup_fractions: vec![0.25, 0.5, 0.75],
            warmup_iters: 500,
            polish_lr: lr / 10.0,
            polish_iters: 1000,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.warmup_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(TrainError::InvalidConfig("warm-up fractions must lie in (0, 1]".into()));
        }
        if !(self.polish_lr > 0.0) {
            return Err(TrainError::InvalidConfig("polish lr must be positive".into()));
        }
        Ok(())
    }
}

/// Keeps the first `fraction` of the samples (at least two) of each dataset.
pub fn truncate_horizon(datasets: &[TimeSeriesDataset], fraction: f64) -> Vec<TimeSeriesDataset> {
    datasets
        .iter()
        .map(|d| {
            let n = d.times.len();
            let keep = ((fraction * (n - 1) as f64).round() as usize + 1).clamp(2, n);
            let mut short = d.clone();
            short.times.truncate(keep);
            short.outputs.truncate(keep);
            short
        })
        .collect()
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.optimizer.lr > 0.0) {
            return Err(TrainError::InvalidConfig("lr must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(TrainError::InvalidConfig("max_iters must be at least 1".into()));
        }
        let b = [self.optimizer.beta1, self.optimizer.beta2];
        if b.iter().any(|b| !(0.0..1.0).contains(b)) || !(self.optimizer.eps > 0.0) {
            return Err(TrainError::InvalidConfig("Adam betas must lie in [0, 1) and eps > 0".into()));
        }
        match &self.schedule {
            Some(schedule) => schedule.validate(),
            None => Ok(()),
        }
    }
}

struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(cfg: AdamConfig, n: usize) -> Self {
        Adam {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Diverged,
}

/// One training run and everything needed to reproduce or reuse it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub id: String,
    pub spec: MlpSpec,
    pub config: TrainingConfig,
    pub loss_history: Vec<f64>,
    pub final_loss: f64,
    /// Best iterate, not the last one.
    pub theta: Vec<f64>,
    pub wall_time: f64,
    pub status: RunStatus,
}

impl ExperimentRecord {
    pub fn iterations(&self) -> usize {
        self.loss_history.len().saturating_sub(1)
    }
}

/// Trains from the zero-output initialization of `aug.spec`.
pub fn train(
    aug: &AugmentedModel,
    datasets: &[TimeSeriesDataset],
    cfg: &TrainingConfig,
) -> Result<ExperimentRecord, TrainError> {
    let theta0 = init_weights(&aug.spec).theta;
    train_from(aug, theta0, datasets, cfg)
}

struct Phase {
    best: f64,
    best_theta: Vec<f64>,
}

/// Runs Adam from `theta`, appending every evaluated loss to `history`.
fn adam_phase(
    aug: &AugmentedModel,
    mut theta: Vec<f64>,
    datasets: &[TimeSeriesDataset],
    optimizer: AdamConfig,
    max_iters: usize,
    patience: usize,
    history: &mut Vec<f64>,
) -> Result<Phase, TrainError> {
    let mut adam = Adam::new(optimizer, theta.len());
    let mut best = f64::INFINITY;
    let mut best_theta = theta.clone();
    let mut since_best = 0;
    for _ in 0..max_iters {
        let (res, grad) = loss_and_gradient(aug, &theta, datasets)?;
        history.push(res.value);
        if res.value < best {
            best = res.value;
            best_theta.clone_from(&theta);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= patience {
                return Ok(Phase { best, best_theta });
            }
        }
        adam.step(&mut theta, &grad);
    }
    let last = loss(aug, &theta, datasets)?.value;
    history.push(last);
    if last < best {
        best = last;
        best_theta = theta;
    }
    Ok(Phase { best, best_theta })
}

/// Trains starting from `theta`.
///
/// The history holds the loss before each Adam step plus the loss after the
/// last step, so `max_iters` steps without early stopping give
/// `max_iters + 1` entries (more when a polish phase follows).
pub fn train_from(
    aug: &AugmentedModel,
    mut theta: Vec<f64>,
    datasets: &[TimeSeriesDataset],
    cfg: &TrainingConfig,
) -> Result<ExperimentRecord, TrainError> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(TrainError::NoData);
    }
    let start = Instant::now();
    let mut scratch = Vec::new();
    if let Some(schedule) = &cfg.schedule {
        for &fraction in &schedule.warmup_fractions {
            let short = truncate_horizon(datasets, fraction);
            let phase = adam_phase(
                aug,
                theta,
                &short,
                cfg.optimizer,
                schedule.warmup_iters,
                cfg.patience,
                &mut scratch,
            )?;
            theta = phase.best_theta;
        }
    }

    let mut history = Vec::with_capacity(cfg.max_iters + 1);
    let main = adam_phase(aug, theta, datasets, cfg.optimizer, cfg.max_iters, cfg.patience, &mut history)?;
    let (mut best, mut best_theta) = (main.best, main.best_theta);
    if let Some(schedule) = cfg.schedule.as_ref().filter(|s| s.polish_iters > 0) {
        let polish = AdamConfig {
            lr: schedule.polish_lr,
            ..cfg.optimizer
        };
        let phase = adam_phase(
            aug,
            best_theta.clone(),
            datasets,
            polish,
            schedule.polish_iters,
            cfg.patience,
            &mut history,
        )?;
        if phase.best < best {
            best = phase.best;
            best_theta = phase.best_theta;
        }
    }

    Ok(ExperimentRecord {
        id: format!("{} lr={}", aug.spec.label(), cfg.optimizer.lr),
        spec: aug.spec.clone(),
        config: cfg.clone(),
        loss_history: history,
        final_loss: best,
        theta: best_theta,
        wall_time: start.elapsed().as_secs_f64(),
        status: if best >= DIVERGENCE_PENALTY {
            RunStatus::Diverged
        } else {
            RunStatus::Completed
        },
    })
}

/// Grid of hidden-layer shapes × activations × seeds, with dimensions taken
/// from `aug`.
pub fn sweep_grid(
    aug: &AugmentedModel,
    hidden: &[Vec<usize>],
    activations: &[Activation],
    seeds: &[u64],
) -> Vec<MlpSpec> {
    let mut specs = Vec::new();
    for h in hidden {
        for &act in activations {
            for &seed in seeds {
                specs.push(MlpSpec {
                    input_dim: aug.spec.input_dim,
                    output_dim: aug.spec.output_dim,
                    hidden: h.clone(),
                    activation: act,
                    seed,
                });
            }
        }
    }
    specs
}

/// Default architecture grid: five hidden shapes × two activations.
pub fn default_hidden_grid() -> Vec<Vec<usize>> {
    vec![vec![8], vec![16], vec![32], vec![16, 16], vec![32, 32]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub records: Vec<ExperimentRecord>,
    pub best: usize,
}

impl SweepResult {
    pub fn best_record(&self) -> &ExperimentRecord {
        &self.records[self.best]
    }

    pub fn find(&self, id: &str) -> Option<&ExperimentRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

/// Index of the best record: lowest final loss, then fewest parameters, then
/// earliest.
pub fn pick_best(records: &[ExperimentRecord]) -> Option<usize> {
    (0..records.len()).min_by(|&a, &b| {
        let (ra, rb) = (&records[a], &records[b]);
        ra.final_loss
            .total_cmp(&rb.final_loss)
            .then(ra.spec.n_params().cmp(&rb.spec.n_params()))
            .then(a.cmp(&b))
    })
}

/// Trains every spec independently (in parallel) and keeps all records.
pub fn architecture_sweep(
    base_aug: &AugmentedModel,
    datasets: &[TimeSeriesDataset],
    specs: &[MlpSpec],
    cfg: &TrainingConfig,
) -> Result<SweepResult, TrainError> {
    if specs.is_empty() {
        return Err(TrainError::InvalidConfig("the sweep needs at least one spec".into()));
    }
    let records = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let aug = AugmentedModel::new(
                base_aug.base.clone(),
                spec.clone(),
                base_aug.normalizer.clone(),
                base_aug.input_mask.clone(),
                base_aug.output_mask.clone(),
                base_aug.dt,
            )?;
            let mut rec = train(&aug, datasets, cfg)?;
            rec.id = format!("exp-{i:03}");
            Ok(rec)
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let best = pick_best(&records).expect("at least one record");
    Ok(SweepResult { records, best })
}

/// CSV summary of a sweep: `id,spec,final_loss,wall_time`.
pub fn sweep_csv(records: &[ExperimentRecord]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["id", "spec", "final_loss", "wall_time"])
        .expect("in-memory write");
    for r in records {
        writer
            .write_record([
                r.id.clone(),
                r.spec.label(),
                r.final_loss.to_string(),
                format!("{:.3}", r.wall_time),
            ])
            .expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}
