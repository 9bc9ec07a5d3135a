//! Translator (gated fusion of thought, long memory and prompt into a
//! control signal) and shaper (control signal to per-layer key/value
//! control tokens injected into the decoder cache).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::generator::{Decoder, GeneratorError, TapeControl};
use crate::impl_module;
use crate::numerics::{Graph, Linear, NodeId, NumericsError, Parameter, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ControlError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which translator inputs are wired in; a dropped input is fed as zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranslatorInputs {
    pub memory: bool,
    pub prompt: bool,
}

impl Default for TranslatorInputs {
    fn default() -> Self {
        Self {
            memory: true,
            prompt: true,
        }
    }
}

/// How a control signal reaches the generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectionMode {
    /// Control tokens appended to the key-value cache.
    #[default]
    Inject,
    /// Every prompt row overwritten by the control signal.
    Replace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlSignal {
    pub c: Vec<f64>,
    /// The fused signal before gating.
    pub pre_gate: Vec<f64>,
    pub step: usize,
    pub trajectory: u64,
}

#[derive(Clone, Debug)]
pub struct Translator {
    pub up: Linear,
    pub down: Linear,
    pub skip: Linear,
    pub gate: Linear,
    pub max_scale: f64,
    pub inputs: TranslatorInputs,
}

impl_module!(Translator { up, down, skip, gate });

impl Translator {
    pub fn new<R: Rng>(d: usize, max_scale: f64, inputs: TranslatorInputs, rng: &mut R) -> Self {
        Self {
            up: Linear::new("translator.up", 3 * d, 2 * d, true, rng),
            down: Linear::new("translator.down", 2 * d, d, true, rng),
            skip: Linear::new("translator.skip", d, d, false, rng),
            gate: Linear::new("translator.gate", d, d, true, rng),
            max_scale,
            inputs,
        }
    }

    pub fn dim(&self) -> usize {
        self.skip.fan_in()
    }

    /// `(c', c)` as `[1×d]` nodes.
    pub fn forward(&self, g: &mut Graph, z: NodeId, m_long: NodeId, p: NodeId) -> (NodeId, NodeId) {
        let d = self.dim();
        let mut zero = None;
        let mut pick = |g: &mut Graph, x: NodeId, keep: bool| {
            if keep {
                x
            } else {
                *zero.get_or_insert_with(|| g.constant(Tensor::zeros(&[1, d])))
            }
        };
        let m = pick(g, m_long, self.inputs.memory);
        let p = pick(g, p, self.inputs.prompt);
        let x = g.concat_cols(&[z, m, p]);
        let h = self.up.forward(g, x);
        let h = g.silu(h);
        let fused = self.down.forward(g, h);
        let skip = self.skip.forward(g, z);
        let pre = g.add(fused, skip);
        let gate = self.gate.forward(g, pre);
        let gate = g.tanh(gate);
        let gate = g.scale(gate, self.max_scale);
        (pre, g.mul(pre, gate))
    }

    pub fn translate(&self, z: &[f64], m_long: &[f64], p: &[f64]) -> Result<ControlSignal, ControlError> {
        let d = self.dim();
        for (name, v) in [("z", z), ("m_long", m_long), ("p", p)] {
            if v.len() != d {
                return Err(ControlError::Dim(format!("{name} has {} entries, translator expects {d}", v.len())));
            }
        }
        let mut g = Graph::new();
        let z = g.constant(Tensor::row(z.to_vec()));
        let m = g.constant(Tensor::row(m_long.to_vec()));
        let p = g.constant(Tensor::row(p.to_vec()));
        let (pre, c) = self.forward(&mut g, z, m, p);
        g.check()?;
        Ok(ControlSignal {
            c: g.value(c).data().to_vec(),
            pre_gate: g.value(pre).data().to_vec(),
            step: 0,
            trajectory: 0,
        })
    }

    /// The gate stage alone: `c' ⊙ max_scale·tanh(W_g c' + b)`.
    pub fn apply_gate(&self, pre: &[f64]) -> Vec<f64> {
        let g = self.gate.apply_row(pre);
        pre.iter()
            .zip(g)
            .map(|(c, g)| c * self.max_scale * g.tanh())
            .collect()
    }
}

/// Per-layer control key/value rows. Keys are unrotated; the cache rotates
/// them at the attach position.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlTokens {
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    pub gates: Vec<f64>,
    pub attach_step: usize,
    pub cfg_replicated: bool,
}

impl ControlTokens {
    pub fn j(&self) -> usize {
        self.keys.first().map_or(0, Tensor::rows)
    }

    pub fn with_step(mut self, k: usize) -> Self {
        self.attach_step = k;
        self
    }

    /// Control rows as seen by the batched decoder: `[B·j × d]` per layer,
    /// with `B = 2` under CFG.
    pub fn batched_values(&self) -> Vec<Tensor> {
        let copies = if self.cfg_replicated { 2 } else { 1 };
        self.values
            .iter()
            .map(|v| {
                Tensor::matrix(copies * v.rows(), v.cols(), v.data().repeat(copies)).expect("control rows")
            })
            .collect()
    }

    pub fn to_tape(&self, g: &mut Graph) -> TapeControl {
        TapeControl {
            step: self.attach_step,
            keys: self.keys.iter().map(|t| g.constant(t.clone())).collect(),
            values: self.values.iter().map(|t| g.constant(t.clone())).collect(),
            gates: self.gates.iter().map(|&v| g.constant(Tensor::scalar(v))).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ShaperLayer {
    pub key: Linear,
    pub value: Linear,
    pub gate: Parameter,
}

impl_module!(ShaperLayer { key, value, gate });

#[derive(Clone, Debug)]
pub struct Shaper {
    pub j: usize,
    pub layers: Vec<ShaperLayer>,
}

impl_module!(Shaper { layers });

impl Shaper {
    /// Value projections and attention gates start at zero, so a fresh
    /// shaper leaves the decoder's outputs untouched.
    pub fn new<R: Rng>(d: usize, j: usize, layers: usize, rng: &mut R) -> Self {
        Self {
            j,
            layers: (0..layers)
                .map(|l| ShaperLayer {
                    key: Linear::new(&format!("shaper.l{l}.key"), d, j * d, false, rng),
                    value: Linear::zeros(&format!("shaper.l{l}.value"), d, j * d, false),
                    gate: Parameter::zeros(format!("shaper.l{l}.gate"), &[1, 1]),
                })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.layers[0].key.fan_in()
    }

    /// Tape form of the control tokens for `c: [1×d]`.
    pub fn forward(&self, g: &mut Graph, c: NodeId, step: usize) -> TapeControl {
        let d = self.dim();
        let rows = |g: &mut Graph, flat: NodeId| {
            let parts: Vec<NodeId> = (0..self.j).map(|r| g.slice_cols(flat, r * d, d)).collect();
            if parts.len() == 1 {
                parts[0]
            } else {
                g.concat_rows(&parts)
            }
        };
        let mut out = TapeControl {
            step,
            keys: Vec::new(),
            values: Vec::new(),
            gates: Vec::new(),
        };
        for layer in &self.layers {
            let k = layer.key.forward(g, c);
            let v = layer.value.forward(g, c);
            out.keys.push(rows(g, k));
            out.values.push(rows(g, v));
            let gate = g.param(&layer.gate);
            out.gates.push(g.tanh(gate));
        }
        out
    }

    pub fn shape(&self, c: &[f64], step: usize, cfg_replicated: bool) -> Result<ControlTokens, ControlError> {
        if c.len() != self.dim() {
            return Err(ControlError::Dim(format!("signal has {} entries, shaper expects {}", c.len(), self.dim())));
        }
        let mut g = Graph::new();
        let cn = g.constant(Tensor::row(c.to_vec()));
        let tape = self.forward(&mut g, cn, step);
        g.check()?;
        Ok(ControlTokens {
            keys: tape.keys.iter().map(|&n| g.value(n).clone()).collect(),
            values: tape.values.iter().map(|&n| g.value(n).clone()).collect(),
            gates: tape.gates.iter().map(|&n| g.value(n).data()[0]).collect(),
            attach_step: step,
            cfg_replicated,
        })
    }
}

/// Appends `tokens` to the decoder cache at step `k`.
pub fn inject(dec: &mut Decoder<'_>, tokens: &ControlTokens, k: usize) -> Result<(), GeneratorError> {
    if tokens.attach_step != k {
        return Err(GeneratorError::Consistency(format!(
            "control tokens attach at step {} but injection is at step {k}",
            tokens.attach_step
        )));
    }
    dec.inject_rows(k, &tokens.keys, &tokens.values, &tokens.gates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gate_suppresses_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Translator::new(8, 1.0, TranslatorInputs::default(), &mut rng);
        t.gate = Linear::zeros("translator.gate", 8, 8, true);
        let s = t.translate(&[0.3; 8], &[-0.2; 8], &[0.5; 8]).unwrap();
        assert!(s.c.iter().all(|&v| v == 0.0));
        assert!(s.pre_gate.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn gate_hand_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Translator::new(2, 1.0, TranslatorInputs::default(), &mut rng);
        t.gate = Linear::zeros("translator.gate", 2, 2, true);
        t.gate.weight.tensor = Tensor::identity(2);
        let c = t.apply_gate(&[2.0, -0.5]);
        let want = [2.0 * 2f64.tanh(), -0.5 * (-0.5f64).tanh()];
        assert!((c[0] - want[0]).abs() < 1e-12 && (c[1] - want[1]).abs() < 1e-12);
        assert!((c[0] - 1.9281).abs() < 1e-4 && (c[1] - 0.2311).abs() < 1e-4);
    }

    #[test]
    fn gate_bound_holds_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Translator::new(6, 1.0, TranslatorInputs::default(), &mut rng);
        for _ in 0..1000 {
            let v: Vec<f64> = (0..18).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let s = t.translate(&v[..6], &v[6..12], &v[12..]).unwrap();
            for (c, pre) in s.c.iter().zip(&s.pre_gate) {
                assert!(c.abs() <= t.max_scale * pre.abs() + 1e-15);
            }
        }
    }

    #[test]
    fn dropped_inputs_are_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Translator::new(
            4,
            1.0,
            TranslatorInputs {
                memory: false,
                prompt: true,
            },
            &mut rng,
        );
        let a = t.translate(&[0.1; 4], &[1.0; 4], &[0.2; 4]).unwrap();
        let b = t.translate(&[0.1; 4], &[-7.0; 4], &[0.2; 4]).unwrap();
        assert_eq!(a.c, b.c);
        let c = t.translate(&[0.1; 4], &[1.0; 4], &[0.9; 4]).unwrap();
        assert_ne!(a.c, c.c);
    }

    #[test]
    fn translate_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Translator::new(4, 1.0, TranslatorInputs::default(), &mut rng);
        assert!(matches!(t.translate(&[0.0; 3], &[0.0; 4], &[0.0; 4]), Err(ControlError::Dim(_))));
    }

    #[test]
    fn shaper_shapes_and_zero_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = Shaper::new(8, 4, 4, &mut rng);
        let tokens = s.shape(&[0.5; 8], 16, false).unwrap();
        assert_eq!(tokens.keys.len(), 4);
        assert_eq!(tokens.values.len(), 4);
        for (k, v) in tokens.keys.iter().zip(&tokens.values) {
            assert_eq!(k.shape(), &[4, 8]);
            assert_eq!(v.shape(), &[4, 8]);
            assert!(v.data().iter().all(|&x| x == 0.0));
            assert!(k.data().iter().any(|&x| x != 0.0));
        }
        assert!(tokens.gates.iter().all(|&g| g == 0.0));
        let cfg = s.shape(&[0.5; 8], 16, true).unwrap();
        for v in cfg.batched_values() {
            assert_eq!(v.shape(), &[8, 8]);
            assert_eq!(v.slice_rows(0, 4), v.slice_rows(4, 4));
        }
    }
}
