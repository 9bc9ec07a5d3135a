//! Latent reasoner: a learnable readout row attends, through a small
//! transformer encoder, over long memory and prompt rows. The readout's
//! final state is the thought vector `z`.

use rand::Rng;

use crate::condenser::{Memory, MemoryKind};
use crate::impl_module;
use crate::numerics::{CrossAttention, FeedForward, Graph, NodeId, NumericsError, Parameter, RmsNorm, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ReasonerError {
    #[error("reasoner reads long memory only, got {0:?}")]
    WrongMemory(MemoryKind),
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn_norm: RmsNorm,
    pub attn: CrossAttention,
    pub ffn_norm: RmsNorm,
    pub ffn: FeedForward,
}

impl_module!(EncoderLayer { attn_norm, attn, ffn_norm, ffn });

impl EncoderLayer {
    fn new<R: Rng>(name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self, NumericsError> {
        Ok(Self {
            attn_norm: RmsNorm::new(&format!("{name}.attn_norm"), d),
            attn: CrossAttention::new(&format!("{name}.attn"), d, heads, rng)?,
            ffn_norm: RmsNorm::new(&format!("{name}.ffn_norm"), d),
            ffn: FeedForward::new(&format!("{name}.ffn"), d, 2 * d, true, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.attn_norm.forward(g, x);
        let (a, _) = self.attn.forward(g, h, h);
        let x = g.add(x, a);
        let h = self.ffn_norm.forward(g, x);
        let f = self.ffn.forward(g, h);
        g.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct Reasoner {
    pub readout: Parameter,
    pub layers: Vec<EncoderLayer>,
}

impl_module!(Reasoner { readout, layers });

impl Reasoner {
    pub fn new<R: Rng>(d: usize, heads: usize, layers: usize, rng: &mut R) -> Result<Self, ReasonerError> {
        Ok(Self {
            readout: Parameter::normal("reasoner.readout", &[1, d], 1.0, rng),
            layers: (0..layers)
                .map(|l| EncoderLayer::new(&format!("reasoner.layer{l}"), d, heads, rng))
                .collect::<Result<_, _>>()?,
        })
    }

    pub fn dim(&self) -> usize {
        self.readout.tensor.cols()
    }

    /// `m_long: [n×d]`, `prompt: [P×d]`; returns `z: [1×d]`.
    pub fn forward(&self, g: &mut Graph, m_long: NodeId, prompt: NodeId) -> NodeId {
        let r = g.param(&self.readout);
        let mut x = g.concat_rows(&[r, m_long, prompt]);
        for layer in &self.layers {
            x = layer.forward(g, x);
        }
        g.slice_rows(x, 0, 1)
    }

    pub fn reason(&self, memory: &Memory, prompt: &Tensor) -> Result<Vec<f64>, ReasonerError> {
        if memory.kind != MemoryKind::Long {
            return Err(ReasonerError::WrongMemory(memory.kind));
        }
        let d = self.dim();
        if memory.tokens.cols() != d || prompt.cols() != d {
            return Err(ReasonerError::Dim(format!(
                "memory width {}, prompt width {}, reasoner width {d}",
                memory.tokens.cols(),
                prompt.cols()
            )));
        }
        let mut g = Graph::new();
        let m = g.constant(memory.tokens.clone());
        let p = g.constant(prompt.clone());
        let z = self.forward(&mut g, m, p);
        g.check()?;
        Ok(g.value(z).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(rows, d, (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn thought_has_model_width_and_rejects_short_memory() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = Reasoner::new(8, 2, 2, &mut rng).unwrap();
        let m = Memory::new(random(4, 8, &mut rng), MemoryKind::Long);
        let p = random(3, 8, &mut rng);
        let z = r.reason(&m, &p).unwrap();
        assert_eq!(z.len(), 8);
        assert!(z.iter().all(|v| v.is_finite()));
        let short = Memory { kind: MemoryKind::Short, ..m.clone() };
        assert!(matches!(r.reason(&short, &p), Err(ReasonerError::WrongMemory(MemoryKind::Short))));
        assert!(r.reason(&m, &random(3, 6, &mut rng)).is_err());
    }

    #[test]
    fn thought_depends_on_memory_and_prompt() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = Reasoner::new(8, 2, 2, &mut rng).unwrap();
        let m = Memory::new(random(4, 8, &mut rng), MemoryKind::Long);
        let m2 = Memory::new(random(4, 8, &mut rng), MemoryKind::Long);
        let p = random(3, 8, &mut rng);
        let p2 = random(3, 8, &mut rng);
        let z = r.reason(&m, &p).unwrap();
        assert_ne!(z, r.reason(&m2, &p).unwrap());
        assert_ne!(z, r.reason(&m, &p2).unwrap());
        assert_eq!(z, r.reason(&m, &p).unwrap());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut r = Reasoner::new(8, 2, 2, &mut rng).unwrap();
        let m = random(4, 8, &mut rng);
        let p = random(3, 8, &mut rng);
        let w = random(1, 8, &mut rng);
        let report = crate::numerics::grad_check(&mut r, |_: &str| true, 1e-5, |r: &Reasoner, g: &mut Graph| {
            let mn = g.constant(m.clone());
            let pn = g.constant(p.clone());
            let z = r.forward(g, mn, pn);
            let wn = g.constant(w.clone());
            let prod = g.mul(z, wn);
            Ok::<_, NumericsError>(g.sum(prod))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
