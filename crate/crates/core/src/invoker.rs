//! The invocation policy: a four-signal state, a small MLP producing an
//! invocation probability, and the CONTINUE/REASON draw.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::generator::{entropy, Action};
use crate::impl_module;
use crate::numerics::{sigmoid, Graph, Linear, NodeId, NumericsError, Tensor, Unary};

#[derive(Debug, thiserror::Error)]
pub enum InvokerError {
    #[error("cosine of a zero-norm vector")]
    ZeroNorm,
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("invalid signal mask {0:?}")]
    Mask(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvokerState {
    pub c: f64,
    pub u: f64,
    pub delta_c: f64,
    pub v: f64,
}

impl InvokerState {
    pub fn to_array(self) -> [f64; 4] {
        [self.c, self.u, self.delta_c, self.v]
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, InvokerError> {
    if a.len() != b.len() {
        return Err(InvokerError::Dim(format!("{} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(InvokerError::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn population_variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    values.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// `history` holds the consistency values of earlier checkpoints of the
/// same trajectory, oldest first.
pub fn extract_state(m_s: &[f64], p: &[f64], logits: &[f64], history: &[f64]) -> Result<InvokerState, InvokerError> {
    let c = cosine(m_s, p)?;
    let u = entropy(logits)?;
    let delta_c = history.last().map_or(0.0, |prev| c - prev);
    let v = if history.iter().all(|&h| h == c) {
        0.0
    } else {
        population_variance(history.iter().copied().chain(std::iter::once(c)))
    };
    Ok(InvokerState { c, u, delta_c, v })
}

/// Which of the four signals feed the policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalMask {
    pub c: bool,
    pub u: bool,
    pub delta_c: bool,
    pub v: bool,
}

impl Default for SignalMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl SignalMask {
    pub const ALL: Self = Self {
        c: true,
        u: true,
        delta_c: true,
        v: true,
    };

    const NAMES: [&'static str; 4] = ["c", "u", "delta_c", "v"];

    fn flags(self) -> [bool; 4] {
        [self.c, self.u, self.delta_c, self.v]
    }

    pub fn without(index: usize) -> Self {
        let mut f = Self::ALL.flags();
        f[index] = false;
        Self {
            c: f[0],
            u: f[1],
            delta_c: f[2],
            v: f[3],
        }
    }

    pub fn dim(self) -> usize {
        self.flags().iter().filter(|&&f| f).count()
    }

    pub fn select(self, s: &InvokerState) -> Vec<f64> {
        s.to_array()
            .into_iter()
            .zip(self.flags())
            .filter_map(|(v, f)| f.then_some(v))
            .collect()
    }
}

impl fmt::Display for SignalMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on: Vec<&str> = Self::NAMES
            .iter()
            .zip(self.flags())
            .filter_map(|(n, on)| on.then_some(*n))
            .collect();
        f.write_str(&on.join("+"))
    }
}

impl FromStr for SignalMask {
    type Err = InvokerError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut f = [false; 4];
        for part in s.split('+').map(str::trim).filter(|p| !p.is_empty()) {
            let i = Self::NAMES
                .iter()
                .position(|n| *n == part)
                .ok_or_else(|| InvokerError::Mask(s.to_string()))?;
            f[i] = true;
        }
        let mask = Self {
            c: f[0],
            u: f[1],
            delta_c: f[2],
            v: f[3],
        };
        if mask.dim() == 0 {
            return Err(InvokerError::Mask(s.to_string()));
        }
        Ok(mask)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Logistic MLP over the selected signals. With two layers:
/// `dim → hidden (tanh) → 1`; with one, a single linear map. The output
/// layer starts at zero, so a fresh policy says 0.5 everywhere.
#[derive(Clone, Debug)]
pub struct InvokerPolicy {
    pub mask: SignalMask,
    pub layers: Vec<Linear>,
}

impl_module!(InvokerPolicy { layers });

impl InvokerPolicy {
    pub fn new<R: Rng>(mask: SignalMask, hidden: usize, layers: usize, rng: &mut R) -> Self {
        let dim = mask.dim();
        let layers = if layers <= 1 {
            vec![Linear::zeros("invoker.out", dim, 1, true)]
        } else {
            vec![
                Linear::new("invoker.hidden", dim, hidden, true, rng),
                Linear::zeros("invoker.out", hidden, 1, true),
            ]
        };
        Self { mask, layers }
    }

    /// Logit for a `[1×dim]` state node.
    pub fn logit(&self, g: &mut Graph, s: NodeId) -> NodeId {
        let mut x = s;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x);
            if i < last {
                x = g.tanh(x);
            }
        }
        x
    }

    pub fn invoke_prob(&self, s: &InvokerState) -> f64 {
        let mut x = self.mask.select(s);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.apply_row(&x);
            if i < last {
                x.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        sigmoid(x[0])
    }
}

pub fn sample_action<R: Rng>(p: f64, rng: &mut R, mode: Mode) -> Action {
    let reason = match mode {
        Mode::Train => rng.gen::<f64>() < p,
        Mode::Eval => p >= 0.5,
    };
    if reason {
        Action::Reason
    } else {
        Action::Continue
    }
}

/// Tape form of the state for gradient flow through the short memory.
/// `m_s` is `[1×d]`; `history` holds earlier consistency nodes (`[1×1]`).
/// Returns the consistency node and the masked `[1×dim]` state.
pub fn state_tape(
    g: &mut Graph,
    mask: SignalMask,
    m_s: NodeId,
    p: &[f64],
    u: f64,
    history: &[NodeId],
) -> Result<(NodeId, NodeId), InvokerError> {
    let d = g.shape(m_s).1;
    if p.len() != d {
        return Err(InvokerError::Dim(format!("{} vs {}", d, p.len())));
    }
    let pnorm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
    if pnorm == 0.0 || g.value(m_s).data().iter().all(|&x| x == 0.0) {
        return Err(InvokerError::ZeroNorm);
    }
    let pn = g.constant(Tensor::row(p.to_vec()));
    let prod = g.mul(m_s, pn);
    let dot = g.sum(prod);
    let sq = g.unary(m_s, Unary::Square);
    let ss = g.sum(sq);
    let norm = g.unary(ss, Unary::Sqrt);
    let norm = g.scale(norm, pnorm);
    let c = g.div(dot, norm);

    let u = g.constant(Tensor::scalar(u));
    let dc = match history.last() {
        Some(&prev) => g.sub(c, prev),
        None => g.constant(Tensor::scalar(0.0)),
    };
    let v = if history.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let mut all = history.to_vec();
        all.push(c);
        let n = all.len();
        let row = g.concat_cols(&all);
        let total = g.sum(row);
        let mean = g.scale(total, 1.0 / n as f64);
        let ones = g.constant(Tensor::full(&[1, n], 1.0));
        let spread = g.mul_scalar(ones, mean);
        let dev = g.sub(row, spread);
        let sq = g.unary(dev, Unary::Square);
        let s = g.sum(sq);
        g.scale(s, 1.0 / n as f64)
    };
    let parts: Vec<NodeId> = [c, u, dc, v]
        .into_iter()
        .zip(mask.flags())
        .filter_map(|(n, f)| f.then_some(n))
        .collect();
    let state = if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts) };
    Ok((c, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn state_cases() {
        let logits = [0.0; 8];
        let s = extract_state(&[1.0, 2.0], &[1.0, 2.0], &logits, &[]).unwrap();
        assert!((s.c - 1.0).abs() < 1e-15);
        let s = extract_state(&[1.0, 0.0], &[0.0, 3.0], &logits, &[]).unwrap();
        assert_eq!(s.to_array(), [0.0, 1.0, 0.0, 0.0]);
        let p = [1.0, 0.0];
        let m = [0.6, 0.8];
        let s = extract_state(&m, &p, &logits, &[0.2, 0.4]).unwrap();
        assert!((s.c - 0.6).abs() < 1e-12);
        assert!((s.delta_c - 0.2).abs() < 1e-12);
        assert!((s.v - 0.08 / 3.0).abs() < 1e-12);
        assert!(matches!(extract_state(&[0.0, 0.0], &p, &logits, &[]), Err(InvokerError::ZeroNorm)));
    }

    #[test]
    fn variance_is_zero_for_constant_history() {
        let c = cosine(&[1.0, 1.0], &[2.0, 2.0]).unwrap();
        let s = extract_state(&[1.0, 1.0], &[2.0, 2.0], &[0.0, 1.0], &[c, c, c]).unwrap();
        assert_eq!(s.v, 0.0);
        assert_eq!(s.delta_c, 0.0);
    }

    #[test]
    fn fresh_policy_is_indifferent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pol = InvokerPolicy::new(SignalMask::ALL, 32, 2, &mut rng);
        for s in [[0.3, 0.9, -0.1, 0.02], [-1.0, 0.0, 2.0, 5.0]] {
            let st = InvokerState { c: s[0], u: s[1], delta_c: s[2], v: s[3] };
            assert_eq!(pol.invoke_prob(&st), 0.5);
        }
    }

    #[test]
    fn positive_uncertainty_weight_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pol = InvokerPolicy::new(SignalMask::ALL, 32, 1, &mut rng);
        pol.layers[0].weight.tensor = Tensor::matrix(4, 1, vec![-0.3, 2.0, 0.7, -1.0]).unwrap();
        let mut last = 0.0;
        for i in 0..=20 {
            let st = InvokerState { c: 0.4, u: i as f64 / 20.0, delta_c: 0.1, v: 0.01 };
            let p = pol.invoke_prob(&st);
            assert!(p >= last && p > 0.0 && p < 1.0);
            last = p;
        }
    }

    #[test]
    fn eval_thresholds_and_train_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_action(0.999, &mut rng, Mode::Eval), Action::Reason);
        assert_eq!(sample_action(0.001, &mut rng, Mode::Eval), Action::Continue);
        let hits = (0..10_000)
            .filter(|_| sample_action(0.3, &mut rng, Mode::Train) == Action::Reason)
            .count();
        assert!((hits as f64 / 10_000.0 - 0.3).abs() < 0.02);
    }

    #[test]
    fn masked_signals_are_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = SignalMask::without(1);
        let mut pol = InvokerPolicy::new(mask, 32, 2, &mut rng);
        pol.layers[1].weight.tensor.data_mut().iter_mut().for_each(|w| *w = 0.5);
        assert_eq!(pol.layers[0].fan_in(), 3);
        let a = InvokerState { c: 0.2, u: 0.1, delta_c: 0.3, v: 0.04 };
        let b = InvokerState { u: 0.95, ..a };
        assert_eq!(pol.invoke_prob(&a), pol.invoke_prob(&b));
        assert_eq!(mask.to_string(), "c+delta_c+v");
        assert_eq!("c+delta_c+v".parse::<SignalMask>().unwrap(), mask);
        assert!("".parse::<SignalMask>().is_err());
    }

    #[test]
    fn tape_state_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let history = [0.1, -0.3];
        let plain = extract_state(&m, &p, &logits, &history).unwrap();
        let mut g = Graph::new();
        let mn = g.constant(Tensor::row(m));
        let hist: Vec<NodeId> = history.iter().map(|&h| g.constant(Tensor::scalar(h))).collect();
        let (_, s) = state_tape(&mut g, SignalMask::ALL, mn, &p, entropy(&logits).unwrap(), &hist).unwrap();
        for (a, b) in g.value(s).data().iter().zip(plain.to_array()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
