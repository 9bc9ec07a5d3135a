use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LatentMorph, TrainingError};
use crate::control::InjectionMode;
use crate::generator::{
    entropy, generate, Action, CheckpointCtx, Controller, ControllerError, Decision, Intervention, PromptEmbedding,
    Trajectory,
};
use crate::invoker::{extract_state, sample_action, InvokerState, Mode};
use crate::numerics::Tensor;
use crate::synthtask::{baseline_scheduler, reward, SchedulerKind, TaskSpec};

/// What the monitor saw at one checkpoint; enough to rebuild the policy's
/// log-probability on the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointLog {
    pub step: usize,
    pub window: Tensor,
    pub u: f64,
    pub state: InvokerState,
    pub prob: f64,
    pub action: Action,
}

/// Who decides when to reason.
#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    Learned(Mode),
    Schedule(BTreeSet<usize>),
    /// The monitor runs but never asks for reasoning.
    MonitorOnly,
    Never,
}

impl Policy {
    /// Resolves a scheduler for one trajectory; random schedules draw from `rng`.
    pub fn from_scheduler<R: Rng>(kind: SchedulerKind, mode: Mode, seq_len: usize, w: usize, rng: &mut R) -> Self {
        match kind {
            SchedulerKind::Learned => Policy::Learned(mode),
            SchedulerKind::None => Policy::Never,
            other => Policy::Schedule(baseline_scheduler(other, seq_len, w, rng)),
        }
    }
}

pub struct MorphController<'m, R> {
    model: &'m LatentMorph,
    policy: Policy,
    rng: R,
    history: Vec<f64>,
    pub log: Vec<CheckpointLog>,
}

impl<'m, R: Rng> MorphController<'m, R> {
    pub fn new(model: &'m LatentMorph, policy: Policy, rng: R) -> Self {
        Self {
            model,
            policy,
            rng,
            history: Vec::new(),
            log: Vec::new(),
        }
    }

    fn monitor(&mut self, ctx: &CheckpointCtx<'_>) -> Result<CheckpointLog, TrainingError> {
        let k = ctx.step;
        let w = self.model.cfg.invoker.w.min(k);
        let window = ctx.trace.window(k - w, k);
        let m_s = self.model.short.condense_short(&window)?;
        let logits = &ctx.trace.logits[k - 1];
        let state = extract_state(&m_s.pooled, &ctx.prompt.pooled, logits, &self.history)?;
        self.history.push(state.c);
        Ok(CheckpointLog {
            step: k,
            window,
            u: entropy(logits)?,
            state,
            prob: self.model.invoker.invoke_prob(&state),
            action: Action::Continue,
        })
    }

    fn intervene(&self, ctx: &CheckpointCtx<'_>) -> Result<Intervention, TrainingError> {
        let model = self.model;
        let m_l = model.long.condense_long(&ctx.trace.prefix(ctx.step))?;
        let z = model.reasoner.reason(&m_l, &ctx.prompt.tokens)?;
        let signal = model.translator.translate(&z, &m_l.pooled, &ctx.prompt.pooled)?;
        Ok(match model.cfg.injection {
            InjectionMode::Inject => {
                let cfg = model.generator.cfg.cfg_enabled;
                Intervention::Inject(model.shaper.shape(&signal.c, ctx.step, cfg)?)
            }
            InjectionMode::Replace => Intervention::ReplacePrompt(Tensor::row(signal.c)),
        })
    }

    fn decide_inner(&mut self, ctx: &CheckpointCtx<'_>) -> Result<Decision, TrainingError> {
        let (action, prob) = match &self.policy {
            Policy::Learned(mode) => {
                let mode = *mode;
                let mut entry = self.monitor(ctx)?;
                entry.action = sample_action(entry.prob, &mut self.rng, mode);
                let out = (entry.action, entry.prob);
                self.log.push(entry);
                out
            }
            Policy::MonitorOnly => {
                let entry = self.monitor(ctx)?;
                let out = (Action::Continue, entry.prob);
                self.log.push(entry);
                out
            }
            Policy::Schedule(steps) if steps.contains(&ctx.step) => (Action::Reason, 1.0),
            Policy::Schedule(_) | Policy::Never => (Action::Continue, 0.0),
        };
        let intervention = match action {
            Action::Reason => Some(self.intervene(ctx)?),
            Action::Continue => None,
        };
        Ok(Decision {
            action,
            prob,
            intervention,
        })
    }
}

impl<R: Rng> Controller for MorphController<'_, R> {
    fn decide(&mut self, ctx: &CheckpointCtx<'_>) -> Result<Decision, ControllerError> {
        self.decide_inner(ctx).map_err(|e| Box::new(e) as ControllerError)
    }
}

/// One scored trajectory with its monitor log.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub spec: TaskSpec,
    pub trajectory: Trajectory,
    pub log: Vec<CheckpointLog>,
}

impl Rollout {
    /// Mean invocation probability over the learned policy's checkpoints.
    pub fn p_bar(&self) -> f64 {
        self.trajectory.p_bar()
    }
}

/// Generates and scores one trajectory. Token sampling and policy draws use
/// separate streams of a generator seeded with `seed`.
pub fn rollout(
    model: &LatentMorph,
    spec: &TaskSpec,
    prompt: &PromptEmbedding,
    policy: Policy,
    seed: u64,
    temperature: f64,
) -> Result<Rollout, TrainingError> {
    let mut tokens_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy_rng = ChaCha8Rng::seed_from_u64(seed);
    policy_rng.set_stream(1);
    let mut ctl = MorphController::new(model, policy, policy_rng);
    let w = model.cfg.invoker.w;
    let mut trajectory = generate(&model.generator, prompt, w, &mut ctl, &mut tokens_rng, temperature)?;
    trajectory.reward = reward(&trajectory.tokens, spec, model.generator.cfg.seq_len)?.reward;
    trajectory.seed = seed;
    Ok(Rollout {
        spec: spec.clone(),
        trajectory,
        log: ctl.log,
    })
}

/// Resolves `kind` for one trajectory (random schedules draw from their
/// own stream of `seed`) and rolls out.
pub fn rollout_with(
    model: &LatentMorph,
    spec: &TaskSpec,
    kind: SchedulerKind,
    mode: Mode,
    seed: u64,
    temperature: f64,
) -> Result<Rollout, TrainingError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let g = &model.generator.cfg;
    let policy = Policy::from_scheduler(kind, mode, g.seq_len, model.cfg.invoker.w, &mut rng);
    let prompt = model.generator.embed_prompt(spec)?;
    rollout(model, spec, &prompt, policy, seed, temperature)
}
