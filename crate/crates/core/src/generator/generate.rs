//! The generation loop with checkpoint callbacks.

use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Decoder, Generator, GeneratorError, PromptEmbedding};
use crate::control::{inject, ControlTokens};
use crate::numerics::{log_sum_exp, NumericsError, Tensor};

/// Final-layer hidden state and logits of every generated token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HiddenTrace {
    pub states: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
}

impl HiddenTrace {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Hidden rows `lo..hi` stacked into a matrix.
    pub fn window(&self, lo: usize, hi: usize) -> Tensor {
        let rows = &self.states[lo..hi];
        let d = rows.first().map_or(0, Vec::len);
        Tensor::matrix(rows.len(), d, rows.concat()).expect("hidden rows share a width")
    }

    pub fn prefix(&self, k: usize) -> Tensor {
        self.window(0, k)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Continue,
    Reason,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub step: usize,
    pub prob: f64,
    pub action: Action,
}

#[derive(Clone, Debug)]
pub enum Intervention {
    Inject(ControlTokens),
    /// Overwrite every prompt row with the given `[1×d]` signal.
    ReplacePrompt(Tensor),
}

#[derive(Clone, Debug)]
pub struct Decision {
    pub action: Action,
    pub prob: f64,
    pub intervention: Option<Intervention>,
}

impl Decision {
    pub fn cont(prob: f64) -> Self {
        Self {
            action: Action::Continue,
            prob,
            intervention: None,
        }
    }
}

pub struct CheckpointCtx<'a> {
    /// Tokens generated so far; also the attach step for any injection.
    pub step: usize,
    pub tokens: &'a [usize],
    pub trace: &'a HiddenTrace,
    pub prompt: &'a PromptEmbedding,
}

pub type ControllerError = Box<dyn std::error::Error + Send + Sync>;

/// Called every `w` generated tokens, never at step 0 or at the end.
pub trait Controller {
    fn decide(&mut self, ctx: &CheckpointCtx<'_>) -> Result<Decision, ControllerError>;
}

pub struct NoopController;

impl Controller for NoopController {
    fn decide(&mut self, _ctx: &CheckpointCtx<'_>) -> Result<Decision, ControllerError> {
        Ok(Decision::cont(0.0))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timing {
    pub decode: Duration,
    pub monitor: Duration,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub tokens: Vec<usize>,
    pub trace: HiddenTrace,
    pub invocations: Vec<InvocationRecord>,
    pub reward: f64,
    pub seed: u64,
    pub timing: Timing,
}

/// The JSONL form of a trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub tokens: Vec<usize>,
    pub invocation_steps: Vec<usize>,
    pub invocation_probs: Vec<f64>,
    pub reward: f64,
    pub seed: u64,
}

impl Trajectory {
    /// Mean invocation probability over all checkpoints.
    pub fn p_bar(&self) -> f64 {
        if self.invocations.is_empty() {
            return 0.0;
        }
        self.invocations.iter().map(|r| r.prob).sum::<f64>() / self.invocations.len() as f64
    }

    pub fn invocation_steps(&self) -> Vec<usize> {
        self.invocations
            .iter()
            .filter(|r| r.action == Action::Reason)
            .map(|r| r.step)
            .collect()
    }

    pub fn num_invocations(&self) -> usize {
        self.invocations.iter().filter(|r| r.action == Action::Reason).count()
    }

    pub fn record(&self) -> TrajectoryRecord {
        TrajectoryRecord {
            tokens: self.tokens.clone(),
            invocation_steps: self.invocation_steps(),
            invocation_probs: self.invocations.iter().map(|r| r.prob).collect(),
            reward: self.reward,
            seed: self.seed,
        }
    }
}

pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Greedy at `temperature <= 0`, otherwise one categorical draw from
/// `softmax(logits / temperature)`.
pub fn sample_token<R: Rng>(logits: &[f64], temperature: f64, rng: &mut R) -> Result<usize, NumericsError> {
    if logits.is_empty() {
        return Err(NumericsError::Shape("sampling from empty logits".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite("sampling logits".into()));
    }
    if temperature <= 0.0 {
        return Ok(argmax(logits));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let lse = log_sum_exp(&scaled);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, s) in scaled.iter().enumerate() {
        acc += (s - lse).exp();
        if u < acc {
            return Ok(i);
        }
    }
    Ok(scaled.len() - 1)
}

/// Generates `seq_len` tokens, consulting `controller` at every positive
/// multiple of `w` below `seq_len`.
pub fn generate<C: Controller + ?Sized, R: Rng>(
    gen: &Generator,
    prompt: &PromptEmbedding,
    w: usize,
    controller: &mut C,
    rng: &mut R,
    temperature: f64,
) -> Result<Trajectory, GeneratorError> {
    let started = Instant::now();
    let mut monitor = Duration::ZERO;
    let mut dec = Decoder::new(gen, prompt)?;
    let mut traj = Trajectory::default();
    let mut input = gen.cfg.bos();
    for t in 0..gen.cfg.seq_len {
        if t > 0 && w > 0 && t % w == 0 {
            let tick = Instant::now();
            let ctx = CheckpointCtx {
                step: t,
                tokens: &traj.tokens,
                trace: &traj.trace,
                prompt,
            };
            let decision = match controller.decide(&ctx) {
                Ok(d) => d,
                Err(e) => {
                    return Err(GeneratorError::Controller {
                        step: t,
                        message: e.to_string(),
                        partial: Box::new(traj),
                    })
                }
            };
            traj.invocations.push(InvocationRecord {
                step: t,
                prob: decision.prob,
                action: decision.action,
            });
            match decision.intervention {
                Some(Intervention::Inject(tokens)) => inject(&mut dec, &tokens, t)?,
                Some(Intervention::ReplacePrompt(c)) => {
                    let rows = Tensor::matrix(
                        gen.cfg.prompt_len,
                        c.len(),
                        c.data().repeat(gen.cfg.prompt_len),
                    )?;
                    dec.replace_prompt(&rows)?;
                }
                None => {}
            }
            monitor += tick.elapsed();
        }
        let out = dec.decode_step(input, t, rng, temperature)?;
        traj.tokens.push(out.token);
        traj.trace.states.push(out.hidden);
        traj.trace.logits.push(out.logits);
        input = out.token;
    }
    traj.timing = Timing {
        decode: started.elapsed().saturating_sub(monitor),
        monitor,
    };
    Ok(traj)
}
