//! Scene coordinate regressor: a fully connected network mapping per-pixel
//! descriptors to 3D scene coordinates, with manual backpropagation and Adam.
//!
//! Activations are stored column-major, one column per pixel.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::DESCRIPTOR_DIM;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegressorError {
    #[error("shape mismatch: {what} expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("forward cache does not belong to the current parameters")]
    StaleCache,
    #[error("network needs at least one layer")]
    NoLayers,
}

fn shape(what: &'static str, expected: usize, actual: usize) -> Result<(), RegressorError> {
    if expected == actual {
        Ok(())
    } else {
        Err(RegressorError::Shape {
            what,
            expected,
            actual,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 16 → 128 → 128 → 128 → 3
    Default,
    /// 16 → 32 → 32 → 32 → 3
    Tiny,
}

impl Preset {
    pub fn layer_sizes(self) -> Vec<usize> {
        let w = match self {
            Preset::Default => 128,
            Preset::Tiny => 32,
        };
        vec![DESCRIPTOR_DIM, w, w, w, 3]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Self {
        Self {
            weight: DMatrix::zeros(self.weight.nrows(), self.weight.ncols()),
            bias: DVector::zeros(self.bias.len()),
        }
    }
}

static STAMP: AtomicU64 = AtomicU64::new(1);

fn next_stamp() -> u64 {
    STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Fully connected network with rectified-linear hidden layers and a linear
/// output layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    /// Changes whenever the parameters do; ties forward caches to them.
    #[serde(skip, default = "next_stamp")]
    stamp: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: u64,
    /// Input of every layer; `inputs[0]` is the descriptor matrix.
    inputs: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

impl ForwardCache {
    pub fn coords(&self) -> Vec<Vector3<f64>> {
        self.output
            .column_iter()
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
    /// `dL/d(features)`, same shape as the forward input.
    pub input: DMatrix<f64>,
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, RegressorError> {
        if layers.is_empty() {
            return Err(RegressorError::NoLayers);
        }
        for l in &layers {
            shape("bias length", l.weight.nrows(), l.bias.len())?;
        }
        for w in layers.windows(2) {
            shape("layer input", w[0].weight.nrows(), w[1].weight.ncols())?;
        }
        Ok(Self {
            layers,
            stamp: next_stamp(),
        })
    }

    /// Glorot-uniform weights and zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self, RegressorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weight: DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-a..=a)),
                    bias: DVector::zeros(fan_out),
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn preset(preset: Preset, seed: u64) -> Self {
        Self::new(&preset.layer_sizes(), seed).expect("preset sizes chain")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.nrows()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Sets the output bias, e.g. to the mean scene coordinate, so training
    /// starts from a centered prediction.
    pub fn set_output_bias(&mut self, bias: &[f64]) -> Result<(), RegressorError> {
        let last = self.layers.last_mut().expect("non-empty");
        shape("output bias", last.bias.len(), bias.len())?;
        last.bias.copy_from_slice(bias);
        self.stamp = next_stamp();
        Ok(())
    }

    pub fn forward(&self, features: &DMatrix<f64>) -> Result<ForwardCache, RegressorError> {
        shape("feature dimension", self.input_dim(), features.nrows())?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = features.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.weight * &x;
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            if i < last {
                z.apply(|v| *v = v.max(0.0));
            }
            inputs.push(x);
            x = z;
        }
        Ok(ForwardCache {
            stamp: self.stamp,
            inputs,
            output: x,
        })
    }

    pub fn predict(&self, features: &DMatrix<f64>) -> Result<Vec<Vector3<f64>>, RegressorError> {
        Ok(self.forward(features)?.coords())
    }

    /// Reverse-mode gradients given `dL/dy` for every output column.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &[Vector3<f64>],
    ) -> Result<Gradients, RegressorError> {
        if cache.stamp != self.stamp {
            return Err(RegressorError::StaleCache);
        }
        shape("output dimension", 3, self.output_dim())?;
        shape("upstream length", cache.output.ncols(), upstream.len())?;
        let mut delta = DMatrix::from_fn(3, upstream.len(), |r, c| upstream[c][r]);
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[i];
            grads.push(Layer {
                weight: &delta * x.transpose(),
                bias: delta.column_sum(),
            });
            let mut dx = l.weight.transpose() * &delta;
            if i > 0 {
                // x is the rectified output of the previous layer
                dx.zip_apply(x, |d, a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            delta = dx;
        }
        grads.reverse();
        Ok(Gradients {
            layers: grads,
            input: delta,
        })
    }

    fn check_like(&self, layers: &[Layer]) -> Result<(), RegressorError> {
        shape("layer count", self.layers.len(), layers.len())?;
        for (a, b) in self.layers.iter().zip(layers) {
            shape("weight size", a.weight.len(), b.weight.len())?;
            shape("bias size", a.bias.len(), b.bias.len())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Vec<Layer>,
    second: Vec<Layer>,
}

impl Adam {
    pub fn new(mlp: &Mlp, learning_rate: f64) -> Self {
        let zeros: Vec<Layer> = mlp.layers.iter().map(Layer::zeros_like).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&mut self, mlp: &mut Mlp, grads: &Gradients) -> Result<(), RegressorError> {
        mlp.check_like(&grads.layers)?;
        mlp.check_like(&self.first)?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.learning_rate);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        };
        for (((p, g), m), v) in mlp
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            update(
                p.weight.as_mut_slice(),
                g.weight.as_slice(),
                m.weight.as_mut_slice(),
                v.weight.as_mut_slice(),
            );
            update(
                p.bias.as_mut_slice(),
                g.bias.as_slice(),
                m.bias.as_mut_slice(),
                v.bias.as_mut_slice(),
            );
        }
        mlp.stamp = next_stamp();
        Ok(())
    }
}

pub const CHECKPOINT_FORMAT: &str = "dsac-checkpoint";

/// Network, optimizer and training progress, stored through
/// [`crate::store`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub preset: Option<Preset>,
    pub network: Mlp,
    pub optimizer: Adam,
    /// Training iterations completed so far, across phases.
    pub iteration: u64,
    pub phase: String,
}
