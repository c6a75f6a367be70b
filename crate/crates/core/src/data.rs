//! Telemetry datasets and their CSV form (`t,<output_1>,...`).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{simulate, DynamicalModel, SimError, Trajectory};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("invalid dataset `{id}`: {reason}")]
    Invalid { id: String, reason: String },
    #[error(transparent)]
    Simulation(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Train => "train",
            Role::Test => "test",
        })
    }
}

/// One experiment: sampled outputs plus the parameter configuration it was
/// recorded under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    pub id: String,
    pub times: Vec<f64>,
    /// `n_times × n_out`
    pub outputs: Vec<Vec<f64>>,
    pub config: Vec<f64>,
    pub role: Role,
}

impl TimeSeriesDataset {
    pub fn new(
        id: impl Into<String>,
        times: Vec<f64>,
        outputs: Vec<Vec<f64>>,
        config: Vec<f64>,
        role: Role,
    ) -> Result<Self, DataError> {
        let ds = TimeSeriesDataset {
            id: id.into(),
            times,
            outputs,
            config,
            role,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn invalid(&self, reason: impl Into<String>) -> DataError {
        DataError::Invalid {
            id: self.id.clone(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.times.len() < 2 {
            return Err(self.invalid("at least two samples are required"));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(self.invalid("times must be strictly increasing"));
        }
        if self.outputs.len() != self.times.len() {
            return Err(self.invalid("one output row per sample is required"));
        }
        let n_out = self.outputs[0].len();
        if n_out == 0 || self.outputs.iter().any(|r| r.len() != n_out) {
            return Err(self.invalid("output rows must have equal, non-zero width"));
        }
        if self
            .outputs
            .iter()
            .flatten()
            .chain(&self.times)
            .chain(&self.config)
            .any(|v| !v.is_finite())
        {
            return Err(self.invalid("all values must be finite"));
        }
        Ok(())
    }

    /// Checks the dataset against a model's parameter and output counts.
    pub fn check_model(&self, model: &DynamicalModel) -> Result<(), DataError> {
        if self.config.len() != model.params().len() {
            return Err(self.invalid(format!(
                "config has {} values, model `{}` has {} parameters",
                self.config.len(),
                model.name(),
                model.params().len()
            )));
        }
        if self.n_outputs() != model.n_outputs() {
            return Err(self.invalid(format!(
                "{} output channels, model `{}` has {}",
                self.n_outputs(),
                model.name(),
                model.n_outputs()
            )));
        }
        Ok(())
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.first().map_or(0, |r| r.len())
    }

    pub fn t_span(&self) -> (f64, f64) {
        (self.times[0], *self.times.last().unwrap())
    }

    /// Population standard deviation of each output channel.
    pub fn channel_std(&self) -> Vec<f64> {
        let n = self.outputs.len() as f64;
        (0..self.n_outputs())
            .map(|c| {
                let mean = self.outputs.iter().map(|r| r[c]).sum::<f64>() / n;
                let var = self.outputs.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
                var.sqrt()
            })
            .collect()
    }

    pub fn from_trajectory(
        id: impl Into<String>,
        traj: &Trajectory,
        config: Vec<f64>,
        role: Role,
    ) -> Result<Self, DataError> {
        Self::new(id, traj.times.clone(), traj.outputs.clone(), config, role)
    }

    /// Reads `t,<name>...` CSV. Returns the dataset and the output names.
    pub fn read_csv(
        path: &Path,
        id: impl Into<String>,
        config: Vec<f64>,
        role: Role,
    ) -> Result<(Self, Vec<String>), DataError> {
        let id = id.into();
        let shown = path.display().to_string();
        let csv_err = |source| DataError::Csv {
            path: shown.clone(),
            source,
        };
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(csv_err)?;
        let header = reader.headers().map_err(csv_err)?.clone();
        if header.get(0) != Some("t") || header.len() < 2 {
            return Err(DataError::Invalid {
                id,
                reason: format!("{shown}: header must be `t,<output>,...`"),
            });
        }
        let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut times = Vec::new();
        let mut outputs = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(csv_err)?;
            let values = record
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|e| DataError::Invalid {
                    id: id.clone(),
                    reason: format!("{shown}: row {}: {e}", line + 2),
                })?;
            if values.len() != names.len() + 1 {
                return Err(DataError::Invalid {
                    id,
                    reason: format!("{shown}: row {} has {} fields", line + 2, values.len()),
                });
            }
            times.push(values[0]);
            outputs.push(values[1..].to_vec());
        }
        Ok((Self::new(id, times, outputs, config, role)?, names))
    }

    pub fn write_csv(&self, path: &Path, output_names: &[String]) -> Result<(), DataError> {
        let shown = path.display().to_string();
        let csv_err = |source| DataError::Csv {
            path: shown.clone(),
            source,
        };
        let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["t".to_string()];
        header.extend(output_names.iter().cloned());
        writer.write_record(&header).map_err(csv_err)?;
        for (t, row) in self.times.iter().zip(&self.outputs) {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            writer.write_record(&rec).map_err(csv_err)?;
        }
        writer.flush().map_err(|source| DataError::Io {
            path: shown.clone(),
            source,
        })?;
        Ok(())
    }
}

/// Evenly spaced sample grid with `n` points on `[t0, t1]`.
pub fn uniform_grid(t0: f64, t1: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2, "a grid needs at least two points");
    let step = (t1 - t0) / (n - 1) as f64;
    (0..n)
        .map(|i| if i + 1 == n { t1 } else { t0 + i as f64 * step })
        .collect()
}

/// Simulates `model` at `p` and packages the sampled outputs as a dataset.
pub fn generate_dataset(
    model: &DynamicalModel,
    id: impl Into<String>,
    p: Vec<f64>,
    grid: &[f64],
    dt: f64,
    role: Role,
) -> Result<TimeSeriesDataset, DataError> {
    let traj = simulate(model, &p, (grid[0], *grid.last().unwrap()), dt, grid)?;
    TimeSeriesDataset::from_trajectory(id, &traj, p, role)
}
