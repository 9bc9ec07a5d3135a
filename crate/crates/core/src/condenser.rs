//! Latent-query condensers over decoder hidden states.
//!
//! One parametric form, `M = refine(Q + CA(Q, H, H))` with
//! `refine(x) = x + MLP(x)`, is instantiated twice: a short condenser over
//! the most recent window and a long condenser that streams the history in
//! chunks, keeping the `n` candidates with the largest cumulative attention
//! mass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::impl_module;
use crate::numerics::{CrossAttention, FeedForward, Graph, Linear, NodeId, NumericsError, Parameter, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum CondenserError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemoryKind {
    Short,
    Long,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Memory {
    pub tokens: Tensor,
    pub pooled: Vec<f64>,
    pub kind: MemoryKind,
}

impl Memory {
    pub fn new(tokens: Tensor, kind: MemoryKind) -> Self {
        let pooled = tokens.mean_rows().into_data();
        Self { tokens, pooled, kind }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CondenserConfig {
    pub tokens: usize,
    pub heads: usize,
    /// Streaming chunk size; only the long instance uses it.
    pub chunk: usize,
}

#[derive(Clone, Debug)]
pub struct Condenser {
    pub kind: MemoryKind,
    pub cfg: CondenserConfig,
    pub queries: Parameter,
    pub attn: CrossAttention,
    pub refine: FeedForward,
    /// Hidden-state readout projection; `None` is the identity.
    pub proj: Option<Linear>,
}

impl_module!(Condenser { queries, attn, refine, proj });

impl Condenser {
    pub fn new<R: Rng>(
        name: &str,
        kind: MemoryKind,
        d: usize,
        cfg: CondenserConfig,
        rng: &mut R,
    ) -> Result<Self, CondenserError> {
        if cfg.tokens == 0 {
            return Err(CondenserError::Precondition("condenser needs at least one query".into()));
        }
        if kind == MemoryKind::Long && cfg.chunk == 0 {
            return Err(CondenserError::Precondition("chunk size must be positive".into()));
        }
        Ok(Self {
            kind,
            cfg,
            queries: Parameter::normal(format!("{name}.queries"), &[cfg.tokens, d], 1.0, rng),
            attn: CrossAttention::new(&format!("{name}.attn"), d, cfg.heads, rng)?,
            refine: FeedForward::new(&format!("{name}.refine"), d, 2 * d, true, rng),
            proj: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.attn.dim()
    }

    /// Single pass of the parametric form over `h: [m×d]`; `[n×d]` out.
    pub fn forward(&self, g: &mut Graph, h: NodeId) -> NodeId {
        let q = g.param(&self.queries);
        let h = match &self.proj {
            Some(p) => p.forward(g, h),
            None => h,
        };
        let (ca, _) = self.attn.forward(g, q, h);
        let x = g.add(q, ca);
        let r = self.refine.forward(g, x);
        g.add(x, r)
    }

    fn check_rows(&self, rows: usize, max: Option<usize>) -> Result<(), CondenserError> {
        if rows == 0 {
            return Err(CondenserError::Precondition("empty hidden-state window".into()));
        }
        if let Some(max) = max.filter(|&m| rows > m) {
            return Err(CondenserError::Precondition(format!("{rows} rows exceed the limit of {max}")));
        }
        Ok(())
    }

    fn run(&self, h: &Tensor) -> Result<Tensor, CondenserError> {
        let mut g = Graph::new();
        let hn = g.constant(h.clone());
        let m = self.forward(&mut g, hn);
        g.check()?;
        Ok(g.value(m).clone())
    }

    pub fn condense_short(&self, window: &Tensor) -> Result<Memory, CondenserError> {
        self.check_rows(window.rows(), None)?;
        Ok(Memory::new(self.run(window)?, MemoryKind::Short))
    }

    /// Attention mass each pool row receives from the learnable queries,
    /// summed over queries and averaged over heads.
    fn retention_mass(&self, pool: &Tensor) -> Result<Vec<f64>, CondenserError> {
        let (_, attn) = self.attn.apply(&self.queries.tensor, pool, pool)?;
        let (heads, n, m) = (self.attn.heads, self.cfg.tokens, pool.rows());
        let mut mass = vec![0.0; m];
        for h in 0..heads {
            for q in 0..n {
                let row = &attn.data()[(h * n + q) * m..(h * n + q + 1) * m];
                mass.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
        }
        mass.iter_mut().for_each(|a| *a /= heads as f64);
        Ok(mass)
    }

    fn update_on(
        &self,
        g: &mut Graph,
        memory: Option<NodeId>,
        book: &mut Bookkeeping,
        chunk: NodeId,
    ) -> Result<NodeId, CondenserError> {
        self.check_rows(g.shape(chunk).0, Some(self.cfg.chunk))?;
        let n = self.cfg.tokens;
        let fresh = self.forward(g, chunk);
        let pool = match memory {
            Some(m) => g.concat_rows(&[m, fresh]),
            None => fresh,
        };
        let mut ids = book.created.clone();
        ids.extend(book.next_id..book.next_id + n);
        book.next_id += n;
        let mass = self.retention_mass(g.value(pool))?;
        let scores: Vec<f64> = book
            .scores
            .iter()
            .chain(std::iter::repeat(&0.0))
            .zip(&mass)
            .map(|(s, m)| s + m)
            .collect();
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
        let mut keep: Vec<usize> = order.into_iter().take(n).collect();
        keep.sort_by_key(|&i| ids[i]);
        book.scores = keep.iter().map(|&i| scores[i]).collect();
        book.created = keep.iter().map(|&i| ids[i]).collect();
        book.chunks_seen += 1;
        if keep.len() == ids.len() {
            Ok(pool)
        } else {
            Ok(g.gather_rows(pool, &keep))
        }
    }

    /// One streaming step on plain values.
    pub fn stream_update(&self, state: &StreamState, chunk: &Tensor) -> Result<StreamState, CondenserError> {
        let mut g = Graph::new();
        let mem = state.memory.as_ref().map(|m| g.constant(m.tokens.clone()));
        let c = g.constant(chunk.clone());
        let mut book = state.book.clone();
        let out = self.update_on(&mut g, mem, &mut book, c)?;
        g.check()?;
        Ok(StreamState {
            memory: Some(Memory::new(g.value(out).clone(), MemoryKind::Long)),
            book,
        })
    }

    /// Folds `h: [k×d]` into memory, `chunk` rows at a time.
    pub fn condense_long(&self, h: &Tensor) -> Result<Memory, CondenserError> {
        self.check_rows(h.rows(), None)?;
        let mut state = StreamState::default();
        let mut start = 0;
        while start < h.rows() {
            let len = self.cfg.chunk.min(h.rows() - start);
            state = self.stream_update(&state, &h.slice_rows(start, len))?;
            start += len;
        }
        Ok(state.memory.expect("at least one chunk"))
    }

    /// [`Condenser::condense_long`] on the tape; survivor selection uses the
    /// current values, gradients flow through the retained rows.
    pub fn condense_long_tape(&self, g: &mut Graph, h: NodeId) -> Result<NodeId, CondenserError> {
        let rows = g.shape(h).0;
        self.check_rows(rows, None)?;
        let mut book = Bookkeeping::default();
        let mut memory = None;
        let mut start = 0;
        while start < rows {
            let len = self.cfg.chunk.min(rows - start);
            let chunk = if len == rows { h } else { g.slice_rows(h, start, len) };
            memory = Some(self.update_on(g, memory, &mut book, chunk)?);
            start += len;
        }
        Ok(memory.expect("at least one chunk"))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Bookkeeping {
    scores: Vec<f64>,
    created: Vec<usize>,
    next_id: usize,
    chunks_seen: usize,
}

/// Long-memory streaming state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StreamState {
    pub memory: Option<Memory>,
    book: Bookkeeping,
}

impl StreamState {
    pub fn chunks_seen(&self) -> usize {
        self.book.chunks_seen
    }

    /// Cumulative retention score of each memory token.
    pub fn cumulative_scores(&self) -> &[f64] {
        &self.book.scores
    }

    /// Creation index of each memory token.
    pub fn created(&self) -> &[usize] {
        &self.book.created
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn long(d: usize, n: usize, heads: usize, chunk: usize, seed: u64) -> Condenser {
        let cfg = CondenserConfig { tokens: n, heads, chunk };
        Condenser::new("cond_long", MemoryKind::Long, d, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn random(rows: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(rows, d, (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identical_rows_give_uniform_attention() {
        let c = long(8, 4, 2, 16, 0);
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let h = Tensor::matrix(5, 8, row.repeat(5)).unwrap();
        let (_, attn) = c.attn.apply(&c.queries.tensor, &h, &h).unwrap();
        assert!(attn.data().iter().all(|&a| (a - 0.2).abs() < 1e-12));
        let mem = c.condense_short(&h).unwrap();
        // every query sees proj(r) = wo(wv(r))
        let pr = c.attn.wo.apply_row(&c.attn.wv.apply_row(&row));
        for q in 0..4 {
            let x: Vec<f64> = c.queries.tensor.row_slice(q).iter().zip(&pr).map(|(a, b)| a + b).collect();
            let mut up = c.refine.up.apply_row(&x);
            up.iter_mut().for_each(|u| *u *= crate::numerics::sigmoid(*u));
            let want: Vec<f64> = x.iter().zip(c.refine.down.apply_row(&up)).map(|(a, b)| a + b).collect();
            for (a, b) in mem.tokens.row_slice(q).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_computed_two_query_case() {
        // w=3, n=2, d=4, one head, identity projections and a zeroed refine MLP.
        let mut c = long(4, 2, 1, 16, 0);
        c.attn = CrossAttention::identity("cond_long.attn", 4, 1).unwrap();
        c.refine.down = Linear::zeros("cond_long.refine.down", 8, 4, true);
        c.queries.tensor = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 1.0, 0.0]]).unwrap();
        let h = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0, 2.0, 0.0, 0.0],
            vec![0.5, 0.5, 0.5, 0.5],
        ])
        .unwrap();
        let mem = c.condense_short(&h).unwrap();
        for q in 0..2 {
            let qr = c.queries.tensor.row_slice(q);
            let s: Vec<f64> = (0..3)
                .map(|r| qr.iter().zip(h.row_slice(r)).map(|(a, b)| a * b).sum::<f64>() / 2.0)
                .collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for col in 0..4 {
                let ca: f64 = (0..3).map(|r| s[r].exp() / z * h.get(r, col)).sum();
                assert!((mem.tokens.get(q, col) - (qr[col] + ca)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooled_is_mean_and_shapes_are_stable() {
        let c = long(8, 4, 2, 16, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in [1, 16, 17, 160] {
            let m = c.condense_long(&random(k, 8, &mut rng)).unwrap();
            assert_eq!(m.tokens.shape(), &[4, 8]);
            let mean = m.tokens.mean_rows();
            assert!(mean.data().iter().zip(&m.pooled).all(|(a, b)| (a - b).abs() <= 1e-12));
        }
        assert!(matches!(
            c.condense_short(&Tensor::zeros(&[0, 8])),
            Err(CondenserError::Precondition(_))
        ));
        let too_long = random(17, 8, &mut rng);
        assert!(c.stream_update(&StreamState::default(), &too_long).is_err());
    }

    #[test]
    fn single_chunk_matches_single_shot() {
        let c = long(8, 4, 2, 16, 2);
        let h = random(12, 8, &mut ChaCha8Rng::seed_from_u64(3));
        let streamed = c.condense_long(&h).unwrap();
        let direct = c.run(&h).unwrap();
        assert_eq!(streamed.tokens, direct);
        let state = c.stream_update(&StreamState::default(), &h).unwrap();
        assert_eq!(state.created(), &[0, 1, 2, 3]);
        assert_eq!(state.chunks_seen(), 1);
    }

    #[test]
    fn streaming_is_deterministic() {
        let c = long(8, 4, 2, 16, 4);
        let h = random(40, 8, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(c.condense_long(&h).unwrap(), c.condense_long(&h).unwrap());
    }

    #[test]
    fn zero_second_chunk_keeps_first_chunk_candidates() {
        let mut c = long(8, 4, 2, 16, 6);
        c.proj = Some(Linear::zeros("cond_long.proj", 8, 8, false));
        let mut h = random(32, 8, &mut ChaCha8Rng::seed_from_u64(7));
        for r in 16..32 {
            h.row_slice_mut(r).fill(0.0);
        }
        let first = c.stream_update(&StreamState::default(), &h.slice_rows(0, 16)).unwrap();
        let second = c.stream_update(&first, &h.slice_rows(16, 16)).unwrap();
        let old = second.created().iter().filter(|&&i| i < 4).count();
        assert!(old > 2, "survivors {:?}", second.created());
        assert!(second.cumulative_scores().iter().all(|s| s.is_finite()));
    }

    #[test]
    fn tape_streaming_matches_plain() {
        let c = long(8, 4, 2, 16, 8);
        let h = random(40, 8, &mut ChaCha8Rng::seed_from_u64(9));
        let plain = c.condense_long(&h).unwrap();
        let mut g = Graph::new();
        let hn = g.constant(h);
        let m = c.condense_long_tape(&mut g, hn).unwrap();
        assert_eq!(g.value(m), &plain.tokens);
    }
}
