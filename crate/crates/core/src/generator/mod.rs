//! Toy decoder-only transformer: rotary positions, a key-value cache with
//! control-entry injection, sampling, and per-step hidden-state export.
//!
//! Layout of one sequence: `prompt_len` prompt rows at positions
//! `0..P`, then one input row per generation step `t` at position `P + t`.
//! Step 0 consumes the BOS token; step `t > 0` consumes `x_{t-1}`. The
//! hidden state and logits of step `t` predict `x_t`.
//!
//! Attention over control entries is gated per layer:
//! `o = o_tok + gate · (o_all − o_tok)`, where `o_tok` attends to token
//! entries only and `o_all` to tokens and controls under one softmax. A
//! gate of 1 is plain concatenated attention; a gate of 0 is an exact no-op.

mod cache;
mod forward;
mod generate;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::impl_module;
use crate::numerics::{FeedForward, Linear, NumericsError, Parameter, RmsNorm, Tensor};
use crate::synthtask::{encode_prompt, TaskConfig, TaskError, TaskSpec};

pub use cache::{Decoder, KvCache, Slot, StepOutput};
pub use forward::{TapeControl, TapeOutput};
pub use generate::{
    argmax, generate, sample_token, Action, CheckpointCtx, Controller, ControllerError, Decision, HiddenTrace,
    Intervention, InvocationRecord, NoopController, Timing, Trajectory, TrajectoryRecord,
};

#[derive(Debug, thiserror::Error)]
pub enum GeneratorError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sequence exhausted at step {0}")]
    Exhausted(usize),
    #[error("cache consistency error: {0}")]
    Consistency(String),
    #[error("controller failed at step {step}: {message}")]
    Controller {
        step: usize,
        message: String,
        partial: Box<Trajectory>,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub prompt_len: usize,
    pub cfg_enabled: bool,
    pub cfg_scale: f64,
    pub regions: usize,
    pub max_count: usize,
    pub rope_base: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            layers: 4,
            heads: 4,
            seq_len: 64,
            prompt_len: 8,
            cfg_enabled: false,
            cfg_scale: 1.5,
            regions: 4,
            max_count: 4,
            rope_base: 10_000.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        let bad = |m: String| Err(GeneratorError::Config(m));
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("rotary embedding needs an even head width, got {}", self.head_dim()));
        }
        if self.seq_len == 0 || self.layers == 0 || self.vocab_size == 0 {
            return bad("seq_len, layers and vocab_size must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn bos(&self) -> usize {
        self.vocab_size
    }

    pub fn task(&self) -> TaskConfig {
        TaskConfig {
            seq_len: self.seq_len,
            vocab_size: self.vocab_size,
            regions: self.regions,
            max_count: self.max_count,
        }
    }
}

/// Prompt rows before any transformer layer plus their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub ids: Vec<usize>,
    pub tokens: Tensor,
    pub pooled: Vec<f64>,
}

impl PromptEmbedding {
    pub fn from_rows(ids: Vec<usize>, tokens: Tensor) -> Self {
        let pooled = tokens.mean_rows().into_data();
        Self { ids, tokens, pooled }
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub attn_norm: RmsNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ffn_norm: RmsNorm,
    pub ffn: FeedForward,
}

impl_module!(Block { attn_norm, wq, wk, wv, wo, ffn_norm, ffn });

impl Block {
    fn new<R: Rng>(name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            attn_norm: RmsNorm::new(&format!("{name}.attn_norm"), d),
            wq: Linear::new(&format!("{name}.wq"), d, d, false, rng),
            wk: Linear::new(&format!("{name}.wk"), d, d, false, rng),
            wv: Linear::new(&format!("{name}.wv"), d, d, false, rng),
            wo: Linear::new(&format!("{name}.wo"), d, d, false, rng),
            ffn_norm: RmsNorm::new(&format!("{name}.ffn_norm"), d),
            ffn: FeedForward::new(&format!("{name}.ffn"), d, 2 * d, false, rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub tok_embed: Parameter,
    pub prompt_embed: Parameter,
    pub blocks: Vec<Block>,
    pub final_norm: RmsNorm,
    pub head: Linear,
}

impl_module!(Generator { tok_embed, prompt_embed, blocks, final_norm, head });

impl Generator {
    pub fn new<R: Rng>(cfg: GeneratorConfig, rng: &mut R) -> Result<Self, GeneratorError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let prompt_vocab = cfg.task().prompt_vocab_size();
        Ok(Self {
            tok_embed: Parameter::normal("gen.tok_embed", &[cfg.vocab_size + 1, d], 1.0, rng),
            prompt_embed: Parameter::normal("gen.prompt_embed", &[prompt_vocab, d], 1.0, rng),
            blocks: (0..cfg.layers)
                .map(|l| Block::new(&format!("gen.block{l}"), d, rng))
                .collect(),
            final_norm: RmsNorm::new("gen.final_norm", d),
            head: Linear::new("gen.head", d, cfg.vocab_size, false, rng),
            cfg,
        })
    }

    pub fn d(&self) -> usize {
        self.cfg.d_model
    }

    /// Embeds prompt symbol ids directly (used for padding-only prompts).
    pub fn embed_ids(&self, ids: &[usize]) -> Result<PromptEmbedding, GeneratorError> {
        let d = self.d();
        let table = &self.prompt_embed.tensor;
        if ids.len() != self.cfg.prompt_len {
            return Err(GeneratorError::Config(format!(
                "prompt has {} symbols, expected {}",
                ids.len(),
                self.cfg.prompt_len
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= table.rows() {
                return Err(GeneratorError::Config(format!("prompt symbol {i} out of range")));
            }
            data.extend_from_slice(table.row_slice(i));
        }
        Ok(PromptEmbedding::from_rows(ids.to_vec(), Tensor::matrix(ids.len(), d, data)?))
    }

    pub fn embed_prompt(&self, spec: &TaskSpec) -> Result<PromptEmbedding, GeneratorError> {
        let ids = encode_prompt(spec, &self.cfg.task(), self.cfg.prompt_len)?;
        self.embed_ids(&ids)
    }

    /// The all-padding prompt used as the unconditional CFG stream.
    pub fn null_prompt(&self) -> PromptEmbedding {
        self.embed_ids(&vec![0; self.cfg.prompt_len]).expect("padding prompt")
    }
}

/// Normalised entropy of `softmax(logits)`, in `[0, 1]`.
pub fn entropy(logits: &[f64]) -> Result<f64, NumericsError> {
    if logits.len() < 2 {
        return Err(NumericsError::Shape("entropy needs at least two logits".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite("entropy logits".into()));
    }
    let lse = crate::numerics::log_sum_exp(logits);
    let h: f64 = logits
        .iter()
        .map(|&l| {
            let lp = l - lse;
            let p = lp.exp();
            if p > 0.0 {
                -p * lp
            } else {
                0.0
            }
        })
        .sum();
    Ok((h / (logits.len() as f64).ln()).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests;
