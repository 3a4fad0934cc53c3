//! Small fully connected networks.
//!
//! Parameters live in one flat vector, layer by layer, each layer as its
//! row-major weight matrix followed by its bias. The forward pass is written
//! once over [`Scalar`] so the same code runs on `f64` and on dual numbers,
//! and a tape version builds the same computation for reverse mode.

mod corrector;
pub mod optim;
mod velocity;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Activation, DiffError, Scalar, Tape, Var};
use crate::persistence::{self, PersistError, Precision};
use crate::rng;

pub use corrector::{ArcTable, CorrectorNet};
pub use velocity::VelocityNet;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("{what}: expected dimension {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("parameter vector has {found} entries, spec needs {expected}")]
    ParamCount { expected: usize, found: usize },
    #[error("checkpoint holds a {found} network, expected {expected}")]
    WrongKind { expected: &'static str, found: &'static str },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Persist(#[from] PersistError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(NetError::Spec("all layer widths must be at least 1".into()));
        }
        Ok(())
    }

    /// Widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.output_dim);
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }
}

/// Offsets of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Layer {
    inputs: usize,
    outputs: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
    params: Vec<f64>,
}

impl Mlp {
    /// LeCun-normal hidden weights, zero biases, all-zero output layer.
    pub fn new(spec: MlpSpec) -> Result<Self, NetError> {
        spec.validate()?;
        let layers = layout(&spec);
        let mut params = vec![0.0; spec.param_count()];
        let mut r = rng::seeded(spec.seed);
        for layer in &layers[..layers.len() - 1] {
            let sd = (1.0 / layer.inputs as f64).sqrt();
            for w in &mut params[layer.w..layer.w + layer.inputs * layer.outputs] {
                *w = sd * rng::normal(&mut r);
            }
        }
        Ok(Self { spec, layers, params })
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self, NetError> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(NetError::ParamCount {
                expected: spec.param_count(),
                found: params.len(),
            });
        }
        let layers = layout(&spec);
        Ok(Self { spec, layers, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Replaces every parameter with a fresh normal draw scaled by `scale` (tests and probes).
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut r = rng::seeded(seed);
        for p in &mut self.params {
            *p = scale * rng::normal(&mut r);
        }
    }

    pub fn forward<S: Scalar>(&self, input: &[S]) -> Vec<S> {
        let mut x: Vec<S> = input.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = &self.params[layer.w..layer.w + layer.inputs * layer.outputs];
            let b = &self.params[layer.b..layer.b + layer.outputs];
            let mut y: Vec<S> = w
                .chunks_exact(layer.inputs)
                .zip(b)
                .map(|(row, bi)| {
                    row.iter()
                        .zip(&x)
                        .fold(S::from_f64(*bi), |acc, (wij, xj)| acc + xj.mul_f64(*wij))
                })
                .collect();
            if l != last {
                for v in &mut y {
                    *v = v.activate(self.spec.activation);
                }
            }
            x = y;
        }
        x
    }

    /// The same forward pass recorded on `tape`, which must borrow [`Mlp::params`].
    pub fn forward_tape(&self, tape: &mut Tape<'_>, input: Var) -> Result<Var, DiffError> {
        let last = self.layers.len() - 1;
        let mut x = input;
        for (l, layer) in self.layers.iter().enumerate() {
            x = tape.affine(layer.w, layer.b, layer.outputs, x)?;
            if l != last {
                x = tape.activate(self.spec.activation, x)?;
            }
        }
        Ok(x)
    }
}

fn layout(spec: &MlpSpec) -> Vec<Layer> {
    let mut offset = 0;
    spec.widths()
        .windows(2)
        .map(|w| {
            let layer = Layer {
                inputs: w[0],
                outputs: w[1],
                w: offset,
                b: offset + w[0] * w[1],
            };
            offset += w[1] * (w[0] + 1);
            layer
        })
        .collect()
}

/// What a checkpoint holds, with the problem dimensions needed to rebuild it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetHeader {
    Corrector { dim: usize, spec: MlpSpec },
    Velocity { dim: usize, cond_dim: usize, spec: MlpSpec },
}

impl NetHeader {
    fn kind(&self) -> &'static str {
        match self {
            NetHeader::Corrector { .. } => "corrector",
            NetHeader::Velocity { .. } => "velocity",
        }
    }
}

pub fn save_checkpoint(path: &Path, header: &NetHeader, params: &[f64], precision: Precision) -> Result<(), NetError> {
    let bytes = persistence::encode_checkpoint(header, params, precision)?;
    std::fs::write(path, bytes).map_err(PersistError::from)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(NetHeader, Precision, Vec<f64>), NetError> {
    let bytes = std::fs::read(path).map_err(PersistError::from)?;
    Ok(persistence::decode_checkpoint(&bytes)?)
}

fn check_dim(what: &'static str, expected: usize, v: &[f64]) -> Result<(), NetError> {
    if v.len() != expected {
        return Err(NetError::Dimension {
            what,
            expected,
            found: v.len(),
        });
    }
    Ok(())
}
