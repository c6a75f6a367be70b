//! Model discovery for dynamical systems.
//!
//! A physics model that fails to calibrate is augmented with a neural
//! correction, trained against telemetry, reduced by output masking and
//! sensitivity ranking, and finally replaced by symbolic expressions. Every
//! reduction is proposed to an engineer, who accepts, overrides or rejects it.

pub mod model;
pub mod nn;
pub mod data;
pub mod ude;
pub mod training;
pub mod reduction;
pub mod symreg;
pub mod session;

pub use model::{DynamicalModel, ModelCatalog, SimError, Trajectory};
