//! Softmax and multi-head attention.
//!
//! Scores are scaled by `1/sqrt(d / heads)`, the per-head width.

use std::sync::Arc;

use rand::Rng;

use super::graph::{softmax_row_masked, Graph, NodeId};
use super::nn::Linear;
use super::tensor::Tensor;
use super::NumericsError;
use crate::impl_module;

/// Softmax over the last dimension of `v`.
pub fn softmax(v: &Tensor) -> Result<Tensor, NumericsError> {
    if v.cols() == 0 {
        return Err(NumericsError::Shape("softmax over an empty dimension".into()));
    }
    v.ensure_finite("softmax input")?;
    let mut out = v.clone();
    for r in 0..out.rows() {
        softmax_row_masked(out.row_slice_mut(r), |_| true);
    }
    Ok(out)
}

/// Attention over already-projected `q [m×d]`, `k [n×d]`, `v [n×d]`.
///
/// Returns the merged head outputs `[m×d]` (before any output projection)
/// and one `[m×n]` attention map per head.
pub fn multi_head(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    mask: Option<Arc<Vec<bool>>>,
) -> (NodeId, Vec<NodeId>) {
    let d = g.shape(q).1;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let s = g.matmul_bt(qh, kh);
        let s = g.scale(s, scale);
        let a = g.softmax(s, mask.clone());
        outs.push(g.matmul(a, vh));
        maps.push(a);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    (out, maps)
}

/// Cross-attention with learned query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl_module!(CrossAttention { wq, wk, wv, wo });

impl CrossAttention {
    pub fn new<R: Rng>(name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self, NumericsError> {
        check_heads(d, heads)?;
        Ok(Self {
            heads,
            wq: Linear::new(&format!("{name}.wq"), d, d, false, rng),
            wk: Linear::new(&format!("{name}.wk"), d, d, false, rng),
            wv: Linear::new(&format!("{name}.wv"), d, d, false, rng),
            wo: Linear::new(&format!("{name}.wo"), d, d, false, rng),
        })
    }

    /// All four projections set to the identity.
    pub fn identity(name: &str, d: usize, heads: usize) -> Result<Self, NumericsError> {
        check_heads(d, heads)?;
        let eye = |suffix: &str| {
            let mut l = Linear::zeros(&format!("{name}.{suffix}"), d, d, false);
            l.weight.tensor = Tensor::identity(d);
            l
        };
        Ok(Self {
            heads,
            wq: eye("wq"),
            wk: eye("wk"),
            wv: eye("wv"),
            wo: eye("wo"),
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.fan_in()
    }

    pub fn forward(&self, g: &mut Graph, queries: NodeId, context: NodeId) -> (NodeId, Vec<NodeId>) {
        let q = self.wq.forward(g, queries);
        let k = self.wk.forward(g, context);
        let v = self.wv.forward(g, context);
        let (merged, maps) = multi_head(g, q, k, v, self.heads, None);
        (self.wo.forward(g, merged), maps)
    }

    /// Tape-free convenience: `(out [m×d], attn [heads×m×n])`.
    pub fn apply(&self, queries: &Tensor, keys: &Tensor, values: &Tensor) -> Result<(Tensor, Tensor), NumericsError> {
        let d = self.dim();
        if queries.cols() != d || keys.cols() != d || values.cols() != d {
            return Err(NumericsError::Shape("cross_attention width mismatch".into()));
        }
        if keys.rows() == 0 || keys.rows() != values.rows() {
            return Err(NumericsError::Shape("cross_attention needs n >= 1 matching keys and values".into()));
        }
        let mut g = Graph::new();
        let qn = g.constant(queries.clone());
        let kn = g.constant(keys.clone());
        let vn = g.constant(values.clone());
        let q = self.wq.forward(&mut g, qn);
        let k = self.wk.forward(&mut g, kn);
        let v = self.wv.forward(&mut g, vn);
        let (merged, maps) = multi_head(&mut g, q, k, v, self.heads, None);
        let out = self.wo.forward(&mut g, merged);
        g.check()?;
        let (m, n) = (queries.rows(), keys.rows());
        let mut attn = Vec::with_capacity(self.heads * m * n);
        for h in maps {
            attn.extend_from_slice(g.value(h).data());
        }
        Ok((g.value(out).clone(), Tensor::new(vec![self.heads, m, n], attn)?))
    }
}

pub fn check_heads(d: usize, heads: usize) -> Result<(), NumericsError> {
    if heads == 0 || d % heads != 0 {
        return Err(NumericsError::Config(format!(
            "width {d} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = softmax(&Tensor::vector(vec![0.0; 4])).unwrap();
        assert_eq!(s.data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_of_log_counts() {
        let v = Tensor::vector(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]);
        let s = softmax(&v).unwrap();
        for (got, want) in s.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let v = Tensor::vector(vec![0.0, f64::NAN]);
        assert!(matches!(softmax(&v), Err(NumericsError::NonFinite(_))));
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            CrossAttention::new("x", 6, 4, &mut rng),
            Err(NumericsError::Config(_))
        ));
    }

    #[test]
    fn single_key_gets_all_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ca = CrossAttention::new("x", 8, 2, &mut rng).unwrap();
        let q = Tensor::matrix(3, 8, (0..24).map(|i| i as f64 * 0.1).collect()).unwrap();
        let kv = Tensor::matrix(1, 8, (0..8).map(|i| 1.0 - i as f64 * 0.2).collect()).unwrap();
        let (out, attn) = ca.apply(&q, &kv, &kv).unwrap();
        assert!(attn.data().iter().all(|&a| a == 1.0));
        // every output row is wo(wv(kv))
        let proj = ca.wo.apply_row(&ca.wv.apply_row(kv.data()));
        for r in 0..3 {
            for (a, b) in out.row_slice(r).iter().zip(&proj) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
