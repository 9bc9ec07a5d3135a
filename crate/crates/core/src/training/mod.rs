//! Generator pretraining, supervised training of the control path, and
//! group-relative policy optimisation of the invoker.

mod grpo;
mod model;
mod rollout;
mod sft;

use serde::Serialize;

use crate::condenser::CondenserError;
use crate::control::ControlError;
use crate::generator::GeneratorError;
use crate::invoker::{InvokerError, Mode};
use crate::numerics::{AdamW, NumericsError};
use crate::reasoner::ReasonerError;
use crate::synthtask::{gen_task, TaskError, Tier};

pub use grpo::{
    adaptive_ref, group_stats, grpo_advantages, grpo_loss, grpo_step, penalized_return, policy_terms, GroupStats,
    RlConfig, ADV_EPS,
};
pub use model::{InvokerConfig, LatentMorph, ModelConfig, Stage};
pub use rollout::{rollout, rollout_with, CheckpointLog, MorphController, Policy, Rollout};
pub use sft::{
    generator_nll, pretrain_generator, sft_corpus, sft_loss, sft_step, task_stream, train_sft, PretrainConfig,
    PretrainLogRow, SftConfig, SftLogRow, SftPair,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Condenser(#[from] CondenserError),
    #[error(transparent)]
    Invoker(#[from] InvokerError),
    #[error(transparent)]
    Reasoner(#[from] ReasonerError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

/// SplitMix64 finaliser; maps `(base, index)` to a well-spread seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RlLogRow {
    pub step: usize,
    pub loss: f64,
    pub mean_reward: f64,
    pub mean_p_bar: f64,
    pub p_ref: f64,
    pub invocations_per_traj: f64,
}

/// GRPO over groups of `cfg.group_size` trajectories sharing one task.
/// Group `i` of the run uses task seed `task_seed + i` and tier
/// `tiers[i % tiers.len()]`.
pub fn train_rl(
    model: &mut LatentMorph,
    cfg: &RlConfig,
    tiers: &[Tier],
    task_seed: u64,
    seed: u64,
) -> Result<Vec<RlLogRow>, TrainingError> {
    if tiers.is_empty() {
        return Err(TrainingError::Config("no task tiers configured".into()));
    }
    if cfg.group_size < 2 || cfg.groups_per_step == 0 {
        return Err(TrainingError::Config("GRPO needs groups of at least 2 and one group per step".into()));
    }
    let task = model.generator.cfg.task();
    let mut opt = AdamW::new(cfg.lr, cfg.beta1, cfg.beta2, 0.0);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut groups = Vec::with_capacity(cfg.groups_per_step);
        for gi in 0..cfg.groups_per_step {
            let i = step * cfg.groups_per_step + gi;
            let spec = gen_task(task_seed + i as u64, tiers[i % tiers.len()], &task)?;
            let prompt = model.generator.embed_prompt(&spec)?;
            let group = (0..cfg.group_size)
                .map(|j| {
                    let s = derive_seed(seed, (i * cfg.group_size + j) as u64);
                    rollout(model, &spec, &prompt, Policy::Learned(Mode::Train), s, cfg.temperature)
                })
                .collect::<Result<Vec<_>, _>>()?;
            groups.push(group);
        }
        let (loss, stats) = grpo_step(model, &mut opt, &groups, cfg)?;
        let all: Vec<&Rollout> = groups.iter().flatten().collect();
        let n = all.len() as f64;
        log.push(RlLogRow {
            step,
            loss,
            mean_reward: all.iter().map(|r| r.trajectory.reward).sum::<f64>() / n,
            mean_p_bar: all.iter().map(|r| r.p_bar()).sum::<f64>() / n,
            p_ref: stats.iter().map(|s| s.p_ref).sum::<f64>() / stats.len() as f64,
            invocations_per_traj: all.iter().map(|r| r.trajectory.num_invocations() as f64).sum::<f64>() / n,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests;
