//! Teacher-forced full-sequence forward pass on the autodiff tape, with
//! control entries supplied as virtual tokens. This is the training path
//! and the recompute-from-scratch reference for the cached decoder.

use std::sync::Arc;

use super::{Generator, GeneratorError};
use crate::numerics::{Graph, NodeId, RopeSpec};

/// One injected control group as tape nodes: per layer, unrotated `[j×d]`
/// keys and values, and a `[1×1]` gate.
#[derive(Clone, Debug)]
pub struct TapeControl {
    pub step: usize,
    pub keys: Vec<NodeId>,
    pub values: Vec<NodeId>,
    pub gates: Vec<NodeId>,
}

#[derive(Clone, Copy, Debug)]
pub struct TapeOutput {
    /// Final normalised hidden rows of the generation inputs, `[T×d]`.
    pub hidden: NodeId,
    /// `[T×V]`; row `t` predicts `x_t`.
    pub logits: NodeId,
}

impl Generator {
    /// Looks up prompt symbol rows on the tape.
    pub fn prompt_rows(&self, g: &mut Graph, ids: &[usize]) -> NodeId {
        let table = g.param(&self.prompt_embed);
        g.gather_rows(table, ids)
    }

    /// Inputs that teacher-force `target`: BOS followed by all but its last token.
    pub fn teacher_inputs(&self, target: &[usize]) -> Vec<usize> {
        std::iter::once(self.cfg.bos())
            .chain(target.iter().copied().take(target.len().saturating_sub(1)))
            .collect()
    }

    /// Runs `[prompt rows; inputs]` through the decoder. Control groups are
    /// visible to every row at or after `prompt_len + step`; all groups use
    /// the gates of the first one.
    pub fn forward_tape(
        &self,
        g: &mut Graph,
        prompt_rows: NodeId,
        inputs: &[usize],
        controls: &[TapeControl],
    ) -> Result<TapeOutput, GeneratorError> {
        let cfg = &self.cfg;
        let (p, d) = g.shape(prompt_rows);
        if p != cfg.prompt_len || d != cfg.d_model {
            return Err(GeneratorError::Config(format!(
                "prompt rows must be [{}×{}]",
                cfg.prompt_len, cfg.d_model
            )));
        }
        if inputs.is_empty() || inputs.len() > cfg.seq_len {
            return Err(GeneratorError::Exhausted(inputs.len()));
        }
        if let Some(&bad) = inputs.iter().find(|&&t| t > cfg.bos()) {
            return Err(GeneratorError::Config(format!("input token {bad} out of range")));
        }
        for c in controls {
            if c.keys.len() != cfg.layers || c.values.len() != cfg.layers || c.gates.len() != cfg.layers {
                return Err(GeneratorError::Consistency("control tokens need one group per layer".into()));
            }
            if c.step >= inputs.len() {
                return Err(GeneratorError::Consistency(format!(
                    "control attached at step {} of a {}-step sequence",
                    c.step,
                    inputs.len()
                )));
            }
        }
        let t = inputs.len();
        let n = p + t;
        let (heads, dh) = (cfg.heads, cfg.head_dim());

        let table = g.param(&self.tok_embed);
        let embeds = g.gather_rows(table, inputs);
        let mut x = g.concat_rows(&[prompt_rows, embeds]);

        let rope = |positions: Vec<usize>| {
            Arc::new(RopeSpec {
                positions,
                head_dim: dh,
                base: cfg.rope_base,
            })
        };
        let token_rope = rope((0..n).collect());
        let mut control_positions = Vec::new();
        for c in controls {
            let j = g.shape(c.keys[0]).0;
            control_positions.extend(std::iter::repeat(p + c.step).take(j));
        }
        let m = control_positions.len();
        let cols = n + m;
        let mut tok_mask = vec![false; n * cols];
        let mut all_mask = vec![false; n * cols];
        for r in 0..n {
            for c in 0..=r {
                tok_mask[r * cols + c] = true;
                all_mask[r * cols + c] = true;
            }
            for (i, &cp) in control_positions.iter().enumerate() {
                all_mask[r * cols + n + i] = r >= cp;
            }
        }
        let (tok_mask, all_mask) = (Arc::new(tok_mask), Arc::new(all_mask));
        let control_rope = rope(control_positions);
        let scale = 1.0 / (dh as f64).sqrt();

        for (l, block) in self.blocks.iter().enumerate() {
            let h = block.attn_norm.forward(g, x);
            let q = block.wq.forward(g, h);
            let k = block.wk.forward(g, h);
            let v = block.wv.forward(g, h);
            let q = g.rope(q, token_rope.clone());
            let mut k = g.rope(k, token_rope.clone());
            let mut v = v;
            if m > 0 {
                let ck: Vec<NodeId> = controls.iter().map(|c| c.keys[l]).collect();
                let cv: Vec<NodeId> = controls.iter().map(|c| c.values[l]).collect();
                let ck = g.concat_rows(&ck);
                let ck = g.rope(ck, control_rope.clone());
                let cv = g.concat_rows(&cv);
                k = g.concat_rows(&[k, ck]);
                v = g.concat_rows(&[v, cv]);
            }
            let mut tok_heads = Vec::with_capacity(heads);
            let mut all_heads = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = g.slice_cols(q, hd * dh, dh);
                let kh = g.slice_cols(k, hd * dh, dh);
                let vh = g.slice_cols(v, hd * dh, dh);
                let s = g.matmul_bt(qh, kh);
                let s = g.scale(s, scale);
                let a = g.softmax(s, Some(tok_mask.clone()));
                tok_heads.push(g.matmul(a, vh));
                if m > 0 {
                    let a = g.softmax(s, Some(all_mask.clone()));
                    all_heads.push(g.matmul(a, vh));
                }
            }
            let merge = |g: &mut Graph, parts: &[NodeId]| if parts.len() == 1 { parts[0] } else { g.concat_cols(parts) };
            let mut o = merge(g, &tok_heads);
            if m > 0 {
                let o_all = merge(g, &all_heads);
                let diff = g.sub(o_all, o);
                let gated = g.mul_scalar(diff, controls[0].gates[l]);
                o = g.add(o, gated);
            }
            let proj = block.wo.forward(g, o);
            x = g.add(x, proj);
            let h2 = block.ffn_norm.forward(g, x);
            let f = block.ffn.forward(g, h2);
            x = g.add(x, f);
        }
        let rows = g.slice_rows(x, p, t);
        let hidden = self.final_norm.forward(g, rows);
        let logits = self.head.forward(g, hidden);
        Ok(TapeOutput { hidden, logits })
    }
}
