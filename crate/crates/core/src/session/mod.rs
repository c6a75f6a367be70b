//! The engineer-in-the-loop pipeline as a resumable, persisted state machine.
//!
//! A session walks `Created → Trained → AwaitingArchDecision → Masked →
//! AwaitingMaskDecision → Analyzed → AwaitingInputDecision → Regressed →
//! AwaitingExpressionDecision → Finalized`. Every `Awaiting*` stage needs a
//! decision (`accept`, `choose:<x>` or `reject`); a rejection ends the session
//! in `Rejected`.

mod final_model;
mod pipeline;
mod store;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{DataError, Role, TimeSeriesDataset};
use crate::model::{CatalogError, DynamicalModel, ModelCatalog, ModelError};
use crate::nn::Activation;
use crate::reduction::{MaskReport, ReductionError, SensitivityReport, DEFAULT_TOLERANCE, DEFAULT_TOP_M};
use crate::symreg::{ParetoFront, SymRegConfig, SymRegError};
use crate::training::{default_hidden_grid, ExperimentRecord, Schedule, SweepResult, TrainError, TrainingConfig};
use crate::ude::UdeError;

pub use final_model::{validate_final, Correction, FinalModel, Validation};
pub use pipeline::{advance, run_auto, step, submit_decision};
pub use store::{SessionSummary, Store};

/// Default seed threaded into every random choice of a session.
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    Created,
    Trained,
    AwaitingArchDecision,
    Masked,
    AwaitingMaskDecision,
    Analyzed,
    AwaitingInputDecision,
    Regressed,
    AwaitingExpressionDecision,
    Finalized,
    Rejected,
}

impl Stage {
    pub fn is_awaiting(self) -> bool {
        matches!(
            self,
            Stage::AwaitingArchDecision
                | Stage::AwaitingMaskDecision
                | Stage::AwaitingInputDecision
                | Stage::AwaitingExpressionDecision
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Stage::Finalized | Stage::Rejected)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Created => "Created",
            Stage::Trained => "Trained",
            Stage::AwaitingArchDecision => "AwaitingArchDecision",
            Stage::Masked => "Masked",
            Stage::AwaitingMaskDecision => "AwaitingMaskDecision",
            Stage::Analyzed => "Analyzed",
            Stage::AwaitingInputDecision => "AwaitingInputDecision",
            Stage::Regressed => "Regressed",
            Stage::AwaitingExpressionDecision => "AwaitingExpressionDecision",
            Stage::Finalized => "Finalized",
            Stage::Rejected => "Rejected",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = SessionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| SessionError::MalformedDecision(format!("unknown stage `{s}`")))
    }
}

/// An engineer's answer at a decision point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Choice {
    Accept,
    Choose(String),
    Reject,
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Choice::Accept => f.write_str("accept"),
            Choice::Choose(x) => write!(f, "choose:{x}"),
            Choice::Reject => f.write_str("reject"),
        }
    }
}

impl FromStr for Choice {
    type Err = SessionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "accept" => Ok(Choice::Accept),
            "reject" => Ok(Choice::Reject),
            other => match other.strip_prefix("choose:") {
                Some(x) if !x.trim().is_empty() => Ok(Choice::Choose(x.trim().to_string())),
                _ => Err(SessionError::MalformedDecision(format!(
                    "`{other}` is not one of accept, choose:<x>, reject"
                ))),
            },
        }
    }
}

impl Serialize for Choice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Choice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// One entry of the append-only decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub stage: Stage,
    pub choice: Choice,
    /// RFC 3339, UTC.
    pub timestamp: String,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session `{0}` not found")]
    NotFound(String),
    #[error("session `{0}` already exists")]
    AlreadyExists(String),
    #[error("{0} is not available yet")]
    NotReady(&'static str),
    #[error("decision not valid at stage {stage}: {reason}")]
    InvalidDecision { stage: Stage, reason: String },
    #[error("stage {0} needs a decision (accept, choose:<x> or reject)")]
    MissingDecision(Stage),
    #[error("a decision for stage {0} is already pending")]
    DecisionPending(Stage),
    #[error("malformed decision: {0}")]
    MalformedDecision(String),
    #[error("session is {0} and cannot advance")]
    Terminal(Stage),
    #[error("invalid session input: {0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("session file {path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ude(#[from] UdeError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Reduction(#[from] ReductionError),
    #[error(transparent)]
    SymReg(#[from] SymRegError),
}

/// Every knob of the automated stages. All randomness derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub seed: u64,
    pub hidden: Vec<Vec<usize>>,
    pub activations: Vec<Activation>,
    /// Initialization seeds per architecture: `seed, seed + 1, ...`.
    pub seeds_per_architecture: usize,
    /// RK4 step for training and validation.
    pub dt: f64,
    pub training: TrainingConfig,
    pub tolerance: f64,
    pub top_m: usize,
    pub symreg: SymRegConfig,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        let lr = 1e-2;
        let training = TrainingConfig {
            optimizer: crate::training::AdamConfig {
                lr,
                ..Default::default()
            },
            max_iters: 2000,
            patience: 2000,
            seed: DEFAULT_SEED,
            schedule: Some(Schedule::horizon_warmup(lr)),
        };
        PipelineSettings {
            seed: DEFAULT_SEED,
            hidden: default_hidden_grid(),
            activations: vec![Activation::Tanh, Activation::Softplus],
            seeds_per_architecture: 3,
            dt: 0.05,
            training,
            tolerance: DEFAULT_TOLERANCE,
            top_m: DEFAULT_TOP_M,
            symreg: SymRegConfig {
                seed: DEFAULT_SEED,
                ..SymRegConfig::default()
            },
        }
    }
}

impl PipelineSettings {
    /// Threads `seed` into training and symbolic regression.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.training.seed = seed;
        self.symreg.seed = seed;
        self
    }

    pub fn arch_seeds(&self) -> Vec<u64> {
        (0..self.seeds_per_architecture as u64)
            .map(|i| self.seed.wrapping_add(i))
            .collect()
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        let bad = |m: &str| Err(SessionError::Invalid(m.to_string()));
        if self.hidden.is_empty() || self.activations.is_empty() || self.seeds_per_architecture == 0 {
            return bad("the architecture grid is empty");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if self.top_m == 0 {
            return bad("top_m must be at least 1");
        }
        self.training.validate()?;
        self.symreg.validate()?;
        Ok(())
    }
}

/// A dataset as referenced by the session file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub csv_path: PathBuf,
    pub role: Role,
    pub config: Vec<f64>,
    /// Hex SHA-256 of the CSV bytes when the session was created.
    pub sha256: String,
}

impl DatasetEntry {
    /// Registers a CSV file, recording its absolute path and content hash.
    pub fn from_csv(
        id: impl Into<String>,
        path: &Path,
        role: Role,
        config: Vec<f64>,
    ) -> Result<Self, SessionError> {
        let csv_path = std::fs::canonicalize(path).map_err(|source| SessionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let sha256 = file_sha256(&csv_path)?;
        Ok(DatasetEntry {
            id: id.into(),
            csv_path,
            role,
            config,
            sha256,
        })
    }

    /// Reads the CSV and checks it still matches the recorded hash and the
    /// model's outputs.
    pub fn load(&self, model: &DynamicalModel) -> Result<TimeSeriesDataset, SessionError> {
        let digest = file_sha256(&self.csv_path)?;
        if digest != self.sha256 {
            return Err(SessionError::Invalid(format!(
                "{} changed since the session was created",
                self.csv_path.display()
            )));
        }
        let (ds, names) = TimeSeriesDataset::read_csv(&self.csv_path, self.id.clone(), self.config.clone(), self.role)?;
        if names != model.output_names() {
            return Err(SessionError::Invalid(format!(
                "{}: columns {:?} do not match the outputs {:?} of `{}`",
                self.csv_path.display(),
                names,
                model.output_names(),
                model.name()
            )));
        }
        ds.check_model(model)?;
        Ok(ds)
    }
}

fn file_sha256(path: &Path) -> Result<String, SessionError> {
    let bytes = std::fs::read(path).map_err(|source| SessionError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Outcome of the output-masking search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskOutcome {
    /// False when no K met the tolerance and the full mask was kept.
    pub feasible: bool,
    pub report: MaskReport,
}

/// The masked network carried into the later stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedModel {
    pub k: usize,
    pub output_mask: Vec<bool>,
    pub record: ExperimentRecord,
}

/// Columns of the regression table, by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSelection {
    pub states: Vec<String>,
    pub params: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetFront {
    /// Name of the corrected differential state.
    pub equation: String,
    pub front: ParetoFront,
    /// Index of the knee entry.
    pub knee: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoArtifact {
    pub columns: Vec<String>,
    pub targets: Vec<TargetFront>,
}

/// The persisted session. Artifacts appear as their stage completes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub model: String,
    pub stage: Stage,
    pub datasets: Vec<DatasetEntry>,
    pub settings: PipelineSettings,
    #[serde(default)]
    pub experiments: Option<SweepResult>,
    #[serde(default)]
    pub selected_experiment: Option<String>,
    #[serde(default)]
    pub mask_report: Option<MaskOutcome>,
    #[serde(default)]
    pub masked: Option<MaskedModel>,
    #[serde(default)]
    pub sensitivity: Option<SensitivityReport>,
    #[serde(default)]
    pub inputs: Option<InputSelection>,
    #[serde(default)]
    pub pareto: Option<ParetoArtifact>,
    #[serde(default)]
    pub final_model: Option<FinalModel>,
    #[serde(default)]
    pub validation: Vec<Validation>,
    #[serde(default)]
    pub decisions: Vec<Decision>,
}

impl Session {
    /// New session in `Created`. The id is derived from the inputs unless
    /// given explicitly.
    pub fn create(
        catalog: &ModelCatalog,
        model: &str,
        datasets: Vec<DatasetEntry>,
        settings: PipelineSettings,
        id: Option<String>,
    ) -> Result<Self, SessionError> {
        let base = catalog.get(model)?;
        settings.validate()?;
        if !datasets.iter().any(|d| d.role == Role::Train) {
            return Err(SessionError::Invalid("at least one training dataset is required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &datasets {
            if !seen.insert(d.id.as_str()) {
                return Err(SessionError::Invalid(format!("duplicate dataset id `{}`", d.id)));
            }
            d.load(&base)?;
        }
        let mut session = Session {
            id: String::new(),
            model: model.to_string(),
            stage: Stage::Created,
            datasets,
            settings,
            experiments: None,
            selected_experiment: None,
            mask_report: None,
            masked: None,
            sensitivity: None,
            inputs: None,
            pareto: None,
            final_model: None,
            validation: Vec::new(),
            decisions: Vec::new(),
        };
        session.id = match id {
            Some(id) => {
                validate_id(&id)?;
                id
            }
            None => session.derived_id(),
        };
        Ok(session)
    }

    /// `s-` plus twelve hex digits of a hash over model, datasets and
    /// settings.
    fn derived_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.model.as_bytes());
        for d in &self.datasets {
            h.update(d.id.as_bytes());
            h.update(d.role.to_string().as_bytes());
            h.update(d.sha256.as_bytes());
            for v in &d.config {
                h.update(v.to_le_bytes());
            }
        }
        h.update(serde_json::to_vec(&self.settings).expect("settings serialize"));
        format!("s-{}", &hex::encode(h.finalize())[..12])
    }

    /// The decision logged for the current stage and not yet acted on.
    pub fn pending_decision(&self) -> Option<&Decision> {
        self.decisions
            .last()
            .filter(|d| self.stage.is_awaiting() && d.stage == self.stage)
    }

    /// Conditions that need the engineer's attention before an automatic
    /// walk should continue.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(sweep) = &self.experiments {
            if sweep.best_record().status == crate::training::RunStatus::Diverged {
                out.push("every training run diverged".to_string());
            }
        }
        if let Some(mask) = &self.mask_report {
            if !mask.feasible {
                out.push(format!(
                    "no output count met the {:.0}% loss tolerance; the full mask is proposed",
                    (mask.report.tolerance - 1.0) * 100.0
                ));
            }
        }
        out
    }

    /// Hash of the decision path (stages and choices, no timestamps or notes).
    pub fn decision_log_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in &self.decisions {
            h.update(d.stage.as_str().as_bytes());
            h.update(b"\x1f");
            h.update(d.choice.to_string().as_bytes());
            h.update(b"\x1e");
        }
        hex::encode(h.finalize())
    }

    pub fn train_entries(&self) -> impl Iterator<Item = &DatasetEntry> {
        self.datasets.iter().filter(|d| d.role == Role::Train)
    }

    pub fn test_entries(&self) -> impl Iterator<Item = &DatasetEntry> {
        self.datasets.iter().filter(|d| d.role == Role::Test)
    }

    /// Heatmap of the sensitivity report with state names attached.
    pub fn heatmap(&self, catalog: &ModelCatalog) -> Result<Heatmap, SessionError> {
        let report = self.sensitivity.as_ref().ok_or(SessionError::NotReady("sensitivity"))?;
        let names = catalog.get(&self.model)?.state_names();
        let label = |v: &[usize]| v.iter().map(|&i| names[i].clone()).collect::<Vec<_>>();
        Ok(Heatmap {
            rows: label(&report.outputs),
            columns: label(&report.inputs),
            matrix: report.jac.clone(),
            ranking: label(&report.input_ranking),
            top_m: report.top_m,
            csv: report.heatmap_csv(&names),
        })
    }
}

/// Sensitivity matrix with labels, as served to the review UI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub ranking: Vec<String>,
    pub top_m: usize,
    pub csv: String,
}

pub fn validate_id(id: &str) -> Result<(), SessionError> {
    let ok = !id.is_empty()
        && id.len() <= 64
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(SessionError::Invalid(format!(
            "session id `{id}` must be 1-64 characters of [A-Za-z0-9_-]"
        )))
    }
}
