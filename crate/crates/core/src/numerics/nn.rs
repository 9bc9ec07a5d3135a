//! Small layer building blocks shared by every trainable module.

use rand::Rng;

use super::graph::{Graph, NodeId};
use super::param::Parameter;
use crate::impl_module;

pub const NORM_EPS: f64 = 1e-6;

/// `x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
}

impl_module!(Linear { weight, bias });

impl Linear {
    pub fn new<R: Rng>(name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        Self {
            weight: Parameter::randn(format!("{name}.weight"), &[fan_in, fan_out], 1.0, rng),
            bias: bias.then(|| Parameter::zeros(format!("{name}.bias"), &[1, fan_out])),
        }
    }

    pub fn zeros(name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self {
            weight: Parameter::zeros(format!("{name}.weight"), &[fan_in, fan_out]),
            bias: bias.then(|| Parameter::zeros(format!("{name}.bias"), &[1, fan_out])),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.tensor.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(&self.weight);
        let y = g.matmul(x, w);
        match &self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    /// Plain (tape-free) application to one row.
    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        let mut y = super::tensor::vecmat(x, self.weight.tensor.data(), self.fan_out());
        if let Some(b) = &self.bias {
            y.iter_mut().zip(b.tensor.data()).for_each(|(a, b)| *a += b);
        }
        y
    }
}

/// Two-layer SiLU MLP `d -> hidden -> d`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl_module!(FeedForward { up, down });

impl FeedForward {
    pub fn new<R: Rng>(name: &str, d: usize, hidden: usize, bias: bool, rng: &mut R) -> Self {
        Self {
            up: Linear::new(&format!("{name}.up"), d, hidden, bias, rng),
            down: Linear::new(&format!("{name}.down"), hidden, d, bias, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.up.forward(g, x);
        let h = g.silu(h);
        self.down.forward(g, h)
    }
}

/// RMS normalisation with a learnable per-channel gain.
#[derive(Clone, Debug)]
pub struct RmsNorm {
    pub gain: Parameter,
}

impl_module!(RmsNorm { gain });

impl RmsNorm {
    pub fn new(name: &str, d: usize) -> Self {
        Self {
            gain: Parameter::ones(format!("{name}.gain"), &[1, d]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let n = g.rms_norm(x, NORM_EPS);
        let gain = g.param(&self.gain);
        g.mul_row(n, gain)
    }

    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        x.iter()
            .zip(self.gain.tensor.data())
            .map(|(v, g)| v * inv * g)
            .collect()
    }
}
