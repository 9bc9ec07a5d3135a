//! Tape-free incremental decoding over a per-layer key-value cache.

use rand::Rng;
use serde::Serialize;

use super::{Block, Generator, GeneratorError, PromptEmbedding};
use crate::numerics::{sigmoid, softmax_row_masked, RopeSpec, Tensor};

/// What a cache entry stands for: a real sequence position, or a control
/// entry rotated at the position it attaches to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Slot {
    Token(usize),
    Control(usize),
}

impl Slot {
    pub fn position(self) -> usize {
        match self {
            Slot::Token(p) | Slot::Control(p) => p,
        }
    }

    pub fn is_control(self) -> bool {
        matches!(self, Slot::Control(_))
    }
}

/// Rotated keys and values for every processed entry, one flat
/// `[entries × d]` buffer per layer.
#[derive(Clone, Debug)]
pub struct KvCache {
    d: usize,
    slots: Vec<Slot>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    gates: Vec<f64>,
}

impl KvCache {
    fn new(layers: usize, d: usize) -> Self {
        Self {
            d,
            slots: Vec::new(),
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            gates: vec![0.0; layers],
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// Position indices of the non-control entries, in cache order.
    pub fn token_positions(&self) -> Vec<usize> {
        self.slots
            .iter()
            .filter(|s| !s.is_control())
            .map(|s| s.position())
            .collect()
    }

    pub fn has_controls(&self) -> bool {
        self.slots.iter().any(|s| s.is_control())
    }

    /// `(attach position, entry count)` per injected group, in order.
    pub fn control_groups(&self) -> Vec<(usize, usize)> {
        let mut groups: Vec<(usize, usize)> = Vec::new();
        let mut prev_control = false;
        for s in &self.slots {
            match *s {
                Slot::Control(p) if prev_control && groups.last().map(|g| g.0) == Some(p) => {
                    groups.last_mut().unwrap().1 += 1;
                }
                Slot::Control(p) => groups.push((p, 1)),
                Slot::Token(_) => {}
            }
            prev_control = s.is_control();
        }
        groups
    }

    pub fn keys(&self, layer: usize) -> Tensor {
        Tensor::matrix(self.len(), self.d, self.keys[layer].clone()).expect("cache shape")
    }

    pub fn values(&self, layer: usize) -> Tensor {
        Tensor::matrix(self.len(), self.d, self.values[layer].clone()).expect("cache shape")
    }

    pub fn gate(&self, layer: usize) -> f64 {
        self.gates[layer]
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub token: usize,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Injection {
    step: usize,
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
    gates: Vec<f64>,
}

/// Incremental decoder state for one sequence. With CFG enabled it keeps a
/// second, unconditional stream and mixes the two logit rows.
pub struct Decoder<'g> {
    gen: &'g Generator,
    rope: RopeSpec,
    streams: Vec<KvCache>,
    inputs: Vec<usize>,
    injections: Vec<Injection>,
}

impl<'g> Decoder<'g> {
    /// Prefills the cache with the prompt rows.
    pub fn new(gen: &'g Generator, prompt: &PromptEmbedding) -> Result<Self, GeneratorError> {
        let cfg = &gen.cfg;
        let mut dec = Self {
            gen,
            rope: RopeSpec {
                positions: Vec::new(),
                head_dim: cfg.head_dim(),
                base: cfg.rope_base,
            },
            streams: Vec::new(),
            inputs: Vec::new(),
            injections: Vec::new(),
        };
        dec.prefill(&prompt.tokens)?;
        Ok(dec)
    }

    fn prefill(&mut self, rows: &Tensor) -> Result<(), GeneratorError> {
        let gen = self.gen;
        let cfg = &gen.cfg;
        if rows.rows() != cfg.prompt_len || rows.cols() != cfg.d_model {
            return Err(GeneratorError::Config(format!(
                "prompt rows must be [{}×{}]",
                cfg.prompt_len, cfg.d_model
            )));
        }
        let mut prompts = vec![rows.clone()];
        if cfg.cfg_enabled {
            prompts.push(gen.null_prompt().tokens);
        }
        self.streams = prompts
            .iter()
            .map(|p| {
                let mut cache = KvCache::new(cfg.layers, cfg.d_model);
                for pos in 0..p.rows() {
                    self.run_row(&mut cache, p.row_slice(pos).to_vec(), pos);
                }
                cache
            })
            .collect();
        Ok(())
    }

    /// The conditional stream's cache.
    pub fn cache(&self) -> &KvCache {
        &self.streams[0]
    }

    pub fn streams(&self) -> &[KvCache] {
        &self.streams
    }

    /// Generation inputs consumed so far.
    pub fn generated(&self) -> usize {
        self.inputs.len()
    }

    /// Consumes `input` at step `t` and returns the logits predicting `x_t`
    /// together with a token drawn at `temperature` (greedy at 0).
    pub fn decode_step<R: Rng>(
        &mut self,
        input: usize,
        t: usize,
        rng: &mut R,
        temperature: f64,
    ) -> Result<StepOutput, GeneratorError> {
        let (hidden, logits) = self.forward_step(input, t)?;
        let token = super::sample_token(&logits, temperature, rng)?;
        Ok(StepOutput { token, hidden, logits })
    }

    /// [`Decoder::decode_step`] without sampling.
    pub fn forward_step(&mut self, input: usize, t: usize) -> Result<(Vec<f64>, Vec<f64>), GeneratorError> {
        let gen = self.gen;
        let cfg = &gen.cfg;
        if t >= cfg.seq_len {
            return Err(GeneratorError::Exhausted(t));
        }
        if t != self.generated() {
            return Err(GeneratorError::Consistency(format!(
                "step {t} requested after {} consumed inputs",
                self.generated()
            )));
        }
        if input > cfg.bos() {
            return Err(GeneratorError::Config(format!("input token {input} out of range")));
        }
        let pos = cfg.prompt_len + t;
        let embed = gen.tok_embed.tensor.row_slice(input).to_vec();
        let mut streams = std::mem::take(&mut self.streams);
        let rows: Vec<Vec<f64>> = streams
            .iter_mut()
            .map(|cache| self.run_row(cache, embed.clone(), pos))
            .collect();
        self.streams = streams;
        self.inputs.push(input);
        let (hidden, mut logits) = self.readout(&rows[0]);
        if let Some(uncond) = rows.get(1) {
            let (_, lu) = self.readout(uncond);
            let s = cfg.cfg_scale;
            logits.iter_mut().zip(&lu).for_each(|(c, u)| *c = u + s * (*c - u));
        }
        Ok((hidden, logits))
    }

    /// Appends one control group per layer, attached at step `k` (position
    /// `prompt_len + k`) and replicated into every stream.
    pub fn inject_rows(
        &mut self,
        k: usize,
        keys: &[Tensor],
        values: &[Tensor],
        gates: &[f64],
    ) -> Result<(), GeneratorError> {
        let gen = self.gen;
        let cfg = &gen.cfg;
        if k != self.generated() {
            return Err(GeneratorError::Consistency(format!(
                "injection at step {k} but {} inputs consumed",
                self.generated()
            )));
        }
        if keys.len() != cfg.layers || values.len() != cfg.layers || gates.len() != cfg.layers {
            return Err(GeneratorError::Consistency("control tokens need one group per layer".into()));
        }
        let j = keys[0].rows();
        for (kt, vt) in keys.iter().zip(values) {
            if kt.rows() != j || vt.rows() != j || kt.cols() != cfg.d_model || vt.cols() != cfg.d_model {
                return Err(GeneratorError::Consistency("control rows must be [j×d] in every layer".into()));
            }
        }
        if self.cache().has_controls() && self.cache().gates != gates {
            return Err(GeneratorError::Consistency("control groups disagree on layer gates".into()));
        }
        let pos = cfg.prompt_len + k;
        for cache in &mut self.streams {
            for l in 0..cfg.layers {
                for r in 0..j {
                    let mut key = keys[l].row_slice(r).to_vec();
                    self.rope.rotate_row(&mut key, pos, false);
                    cache.keys[l].extend_from_slice(&key);
                    cache.values[l].extend_from_slice(values[l].row_slice(r));
                }
            }
            cache.slots.extend(std::iter::repeat(Slot::Control(pos)).take(j));
            cache.gates = gates.to_vec();
        }
        self.injections.push(Injection {
            step: k,
            keys: keys.to_vec(),
            values: values.to_vec(),
            gates: gates.to_vec(),
        });
        Ok(())
    }

    /// Rebuilds every stream with new conditional prompt rows, replaying the
    /// consumed inputs and earlier injections.
    pub fn replace_prompt(&mut self, rows: &Tensor) -> Result<(), GeneratorError> {
        let inputs = std::mem::take(&mut self.inputs);
        let injections = std::mem::take(&mut self.injections);
        self.prefill(rows)?;
        let mut pending = injections.into_iter().peekable();
        for (t, &input) in inputs.iter().enumerate() {
            while let Some(inj) = pending.next_if(|i| i.step == t) {
                self.inject_rows(t, &inj.keys, &inj.values, &inj.gates)?;
            }
            self.forward_step(input, t)?;
        }
        for inj in pending {
            self.inject_rows(inj.step, &inj.keys, &inj.values, &inj.gates)?;
        }
        Ok(())
    }

    fn readout(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hidden = self.gen.final_norm.apply_row(x);
        let logits = self.gen.head.apply_row(&hidden);
        (hidden, logits)
    }

    /// Pushes one row at `pos` through every layer, caching its keys and
    /// values, and returns the final residual stream.
    fn run_row(&self, cache: &mut KvCache, mut x: Vec<f64>, pos: usize) -> Vec<f64> {
        cache.slots.push(Slot::Token(pos));
        for (l, block) in self.gen.blocks.iter().enumerate() {
            let o = self.attend(block, cache, l, &x, pos);
            let proj = block.wo.apply_row(&o);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
            let h = block.ffn_norm.apply_row(&x);
            let mut up = block.ffn.up.apply_row(&h);
            up.iter_mut().for_each(|u| *u *= sigmoid(*u));
            let down = block.ffn.down.apply_row(&up);
            x.iter_mut().zip(&down).for_each(|(a, b)| *a += b);
        }
        x
    }

    fn attend(&self, block: &Block, cache: &mut KvCache, l: usize, x: &[f64], pos: usize) -> Vec<f64> {
        let cfg = &self.gen.cfg;
        let (d, dh) = (cfg.d_model, cfg.head_dim());
        let h = block.attn_norm.apply_row(x);
        let mut q = block.wq.apply_row(&h);
        let mut k = block.wk.apply_row(&h);
        let v = block.wv.apply_row(&h);
        self.rope.rotate_row(&mut q, pos, false);
        self.rope.rotate_row(&mut k, pos, false);
        cache.keys[l].extend_from_slice(&k);
        cache.values[l].extend_from_slice(&v);

        let n = cache.len();
        let controls = cache.has_controls();
        let gate = cache.gates[l];
        let scale = 1.0 / (dh as f64).sqrt();
        let (keys, values, slots) = (&cache.keys[l], &cache.values[l], &cache.slots);
        let mut out = vec![0.0; d];
        let mut scores = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for head in 0..cfg.heads {
            let off = head * dh;
            let qh = &q[off..off + dh];
            for (j, s) in scores.iter_mut().enumerate() {
                let kh = &keys[j * d + off..j * d + off + dh];
                *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            let mix = |weights: &[f64], allowed: &dyn Fn(usize) -> bool| {
                let mut o = vec![0.0; dh];
                for (j, &a) in weights.iter().enumerate() {
                    if allowed(j) {
                        let vh = &values[j * d + off..j * d + off + dh];
                        o.iter_mut().zip(vh).for_each(|(o, v)| *o += a * v);
                    }
                }
                o
            };
            let is_token = |j: usize| !slots[j].is_control();
            weights.copy_from_slice(&scores);
            softmax_row_masked(&mut weights, is_token);
            let o_tok = mix(&weights, &is_token);
            let oh = &mut out[off..off + dh];
            if controls {
                weights.copy_from_slice(&scores);
                softmax_row_masked(&mut weights, |_| true);
                let o_all = mix(&weights, &|_| true);
                for ((o, t), a) in oh.iter_mut().zip(&o_tok).zip(&o_all) {
                    *o = t + gate * (a - t);
                }
            } else {
                oh.copy_from_slice(&o_tok);
            }
        }
        out
    }
}
