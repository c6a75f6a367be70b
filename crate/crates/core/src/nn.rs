//! Multilayer perceptrons with per-layer analytic reverse mode, and the
//! input/output normalizers wrapped around the correction network.
//!
//! Parameters live in one flat vector. Each layer stores its weight matrix
//! (`fan_out × fan_in`, row-major) followed by its bias. Hidden layers apply
//! the activation; the output layer is linear.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to input standard deviations and output scales.
pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("at least two samples are required to fit a normalizer")]
    EmptySamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Softplus,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Softplus => {
                if z > 0.0 {
                    z + (-z).exp().ln_1p()
                } else {
                    z.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative expressed through the activation's output `a`.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            // a = ln(1 + e^z)  =>  sigmoid(z) = 1 - e^{-a}
            Activation::Softplus => -(-a).exp_m1(),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub layers: Vec<LayerShape>,
    pub total: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            output_dim,
            hidden: hidden.to_vec(),
            activation: Activation::Tanh,
            seed: 0,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(NnError::InvalidSpec(format!(
                "all dimensions must be at least 1: {}",
                self.label()
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim);
        dims.extend(&self.hidden);
        dims.push(self.output_dim);
        let mut offset = 0;
        let layers = dims
            .windows(2)
            .map(|w| {
                let shape = LayerShape {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                shape
            })
            .collect();
        Layout {
            layers,
            total: offset,
        }
    }

    pub fn n_params(&self) -> usize {
        self.layout().total
    }

    /// Compact label such as `2-16x16-2 tanh #3`.
    pub fn label(&self) -> String {
        let hidden = if self.hidden.is_empty() {
            "linear".to_string()
        } else {
            self.hidden
                .iter()
                .map(|h| h.to_string())
                .collect::<Vec<_>>()
                .join("x")
        };
        format!(
            "{}-{}-{} {} #{}",
            self.input_dim, hidden, self.output_dim, self.activation, self.seed
        )
    }
}

/// Flat parameter vector together with its layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpWeights {
    pub layout: Layout,
    pub theta: Vec<f64>,
}

impl MlpWeights {
    pub fn from_flat(spec: &MlpSpec, theta: Vec<f64>) -> Result<Self, NnError> {
        let layout = spec.layout();
        check_len("theta", theta.len(), layout.total)?;
        Ok(MlpWeights { layout, theta })
    }

    /// Weight matrix (row-major) and bias of layer `i`.
    pub fn layer(&self, i: usize) -> (&[f64], &[f64]) {
        let l = &self.layout.layers[i];
        (
            &self.theta[l.weight_offset..l.bias_offset],
            &self.theta[l.bias_offset..l.bias_offset + l.fan_out],
        )
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.theta
    }
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<(), NnError> {
    if got == expected {
        Ok(())
    } else {
        Err(NnError::DimensionMismatch {
            what,
            got,
            expected,
        })
    }
}

/// Glorot-uniform hidden layers and an all-zero output layer, so the initial
/// network output is identically zero.
pub fn init_weights(spec: &MlpSpec) -> MlpWeights {
    let layout = spec.layout();
    let mut theta = vec![0.0; layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_layers = layout.layers.len();
    for l in &layout.layers[..n_layers - 1] {
        let limit = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
        for w in &mut theta[l.weight_offset..l.bias_offset] {
            *w = rng.random_range(-limit..limit);
        }
    }
    MlpWeights { layout, theta }
}

/// Per-layer activations kept from a forward pass for reverse mode.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_in: Vec<f64>,
}

impl Workspace {
    pub fn new(spec: &MlpSpec) -> Self {
        let mut acts = vec![vec![0.0; spec.input_dim]];
        acts.extend(spec.hidden.iter().map(|&h| vec![0.0; h]));
        acts.push(vec![0.0; spec.output_dim]);
        Workspace {
            acts,
            delta: Vec::new(),
            delta_in: Vec::new(),
        }
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().map(|a| a.as_slice()).unwrap_or(&[])
    }
}

/// Borrowed network: a spec, its layout and a parameter slice. Hot loops use
/// this directly with a reusable [`Workspace`]; no dimension checks here.
#[derive(Debug, Clone)]
pub struct Mlp<'a> {
    activation: Activation,
    layout: Layout,
    theta: &'a [f64],
}

impl<'a> Mlp<'a> {
    pub fn new(spec: &MlpSpec, theta: &'a [f64]) -> Result<Self, NnError> {
        spec.validate()?;
        let layout = spec.layout();
        check_len("theta", theta.len(), layout.total)?;
        Ok(Mlp {
            activation: spec.activation,
            layout,
            theta,
        })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    /// Evaluates the network on `input`, leaving activations in `ws`.
    pub fn forward_into<'w>(&self, input: &[f64], ws: &'w mut Workspace) -> &'w [f64] {
        ws.acts[0].copy_from_slice(input);
        let n_layers = self.layout.layers.len();
        for (li, l) in self.layout.layers.iter().enumerate() {
            let (prev, rest) = ws.acts.split_at_mut(li + 1);
            let x = &prev[li];
            let out = &mut rest[0];
            let w = &self.theta[l.weight_offset..l.bias_offset];
            let b = &self.theta[l.bias_offset..l.bias_offset + l.fan_out];
            for i in 0..l.fan_out {
                let row = &w[i * l.fan_in..(i + 1) * l.fan_in];
                let mut z = b[i];
                for (wij, xj) in row.iter().zip(x.iter()) {
                    z += wij * xj;
                }
                out[i] = if li + 1 < n_layers {
                    self.activation.apply(z)
                } else {
                    z
                };
            }
        }
        ws.output()
    }

    /// Reverse sweep after [`Mlp::forward_into`]: adds `cotᵀ ∂out/∂θ` into
    /// `grad_theta` and writes `cotᵀ ∂out/∂input` into `grad_input`.
    pub fn backward(
        &self,
        ws: &mut Workspace,
        cotangent: &[f64],
        grad_theta: &mut [f64],
        grad_input: &mut [f64],
    ) {
        let Workspace {
            acts,
            delta,
            delta_in,
        } = ws;
        delta.clear();
        delta.extend_from_slice(cotangent);
        for (li, l) in self.layout.layers.iter().enumerate().rev() {
            let x = &acts[li];
            let w = &self.theta[l.weight_offset..l.bias_offset];
            delta_in.clear();
            delta_in.resize(l.fan_in, 0.0);
            for i in 0..l.fan_out {
                let d = delta[i];
                if d == 0.0 {
                    continue;
                }
                grad_theta[l.bias_offset + i] += d;
                let gw = &mut grad_theta[l.weight_offset + i * l.fan_in..][..l.fan_in];
                let row = &w[i * l.fan_in..(i + 1) * l.fan_in];
                for j in 0..l.fan_in {
                    gw[j] += d * x[j];
                    delta_in[j] += d * row[j];
                }
            }
            if li > 0 {
                for (dj, &a) in delta_in.iter_mut().zip(x.iter()) {
                    *dj *= self.activation.derivative_from_output(a);
                }
            }
            std::mem::swap(delta, delta_in);
        }
        grad_input.copy_from_slice(delta);
    }
}

pub fn forward(spec: &MlpSpec, theta: &[f64], input: &[f64]) -> Result<Vec<f64>, NnError> {
    let mlp = Mlp::new(spec, theta)?;
    check_len("input", input.len(), spec.input_dim)?;
    let mut ws = Workspace::new(spec);
    Ok(mlp.forward_into(input, &mut ws).to_vec())
}

/// Returns `(cotᵀ ∂out/∂θ, cotᵀ ∂out/∂input)`.
pub fn vjp(
    spec: &MlpSpec,
    theta: &[f64],
    input: &[f64],
    cotangent: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), NnError> {
    let mlp = Mlp::new(spec, theta)?;
    check_len("input", input.len(), spec.input_dim)?;
    check_len("cotangent", cotangent.len(), spec.output_dim)?;
    let mut ws = Workspace::new(spec);
    mlp.forward_into(input, &mut ws);
    let mut grad_theta = vec![0.0; mlp.n_params()];
    let mut grad_input = vec![0.0; spec.input_dim];
    mlp.backward(&mut ws, cotangent, &mut grad_theta, &mut grad_input);
    Ok((grad_theta, grad_input))
}

/// `output_dim × input_dim` Jacobian; row `i` is the input part of the vjp
/// with the unit cotangent `e_i`.
pub fn jacobian(spec: &MlpSpec, theta: &[f64], input: &[f64]) -> Result<Vec<Vec<f64>>, NnError> {
    let mlp = Mlp::new(spec, theta)?;
    check_len("input", input.len(), spec.input_dim)?;
    let mut ws = Workspace::new(spec);
    let mut scratch = vec![0.0; mlp.n_params()];
    let mut cot = vec![0.0; spec.output_dim];
    (0..spec.output_dim)
        .map(|i| {
            mlp.forward_into(input, &mut ws);
            cot.iter_mut().for_each(|c| *c = 0.0);
            cot[i] = 1.0;
            let mut row = vec![0.0; spec.input_dim];
            mlp.backward(&mut ws, &cot, &mut scratch, &mut row);
            Ok(row)
        })
        .collect()
}

/// Affine input standardization and per-output magnitude scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity(n_in: usize, n_out: usize) -> Self {
        Normalizer {
            input_shift: vec![0.0; n_in],
            input_scale: vec![1.0; n_in],
            output_scale: vec![1.0; n_out],
        }
    }

    pub fn normalize_input(&self, raw: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = (raw[i] - self.input_shift[i]) / self.input_scale[i];
        }
    }
}

/// Column mean/std of `samples` for the inputs; per-column max absolute value
/// of `output_reference` (time derivatives) for the outputs. Both floored.
pub fn fit_normalizer(
    samples: &[Vec<f64>],
    output_reference: &[Vec<f64>],
) -> Result<Normalizer, NnError> {
    if samples.len() < 2 || output_reference.is_empty() {
        return Err(NnError::EmptySamples);
    }
    let n_in = samples[0].len();
    let n_out = output_reference[0].len();
    for row in samples {
        check_len("sample row", row.len(), n_in)?;
    }
    for row in output_reference {
        check_len("reference row", row.len(), n_out)?;
    }
    let n = samples.len() as f64;
    let mut shift = vec![0.0; n_in];
    for row in samples {
        for (s, v) in shift.iter_mut().zip(row) {
            *s += v;
        }
    }
    shift.iter_mut().for_each(|s| *s /= n);
    let mut var = vec![0.0; n_in];
    for row in samples {
        for j in 0..n_in {
            let d = row[j] - shift[j];
            var[j] += d * d;
        }
    }
    let input_scale = var
        .iter()
        .map(|v| (v / n).sqrt().max(SCALE_FLOOR))
        .collect();
    let mut output_scale = vec![SCALE_FLOOR; n_out];
    for row in output_reference {
        for (s, v) in output_scale.iter_mut().zip(row) {
            *s = s.max(v.abs());
        }
    }
    Ok(Normalizer {
        input_shift: shift,
        input_scale,
        output_scale,
    })
}
