use serde::{Deserialize, Serialize};

use super::{LatentMorph, Rollout, Stage, TrainingError};
use crate::generator::Action;
use crate::invoker::state_tape;
use crate::numerics::{AdamW, Graph, NodeId, Tensor, Unary};

pub const ADV_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub advantage_clip: f64,
    pub entropy_coef: f64,
    pub lambda: f64,
    pub group_size: usize,
    pub groups_per_step: usize,
    pub steps: usize,
    pub temperature: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            advantage_clip: 5.0,
            entropy_coef: 0.001,
            lambda: 0.2,
            group_size: 8,
            groups_per_step: 2,
            steps: 100,
            temperature: 1.0,
        }
    }
}

/// Group-normalised advantages: `(R − mean) / (std + ε)` with the
/// population standard deviation, clipped to `±clip`.
pub fn grpo_advantages(rewards: &[f64], clip: f64) -> Result<Vec<f64>, TrainingError> {
    if rewards.len() < 2 {
        return Err(TrainingError::Data(format!("a group needs at least 2 rewards, got {}", rewards.len())));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(TrainingError::Data("non-finite reward".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    Ok(rewards
        .iter()
        .map(|r| ((r - mean) / (std + ADV_EPS)).clamp(-clip, clip))
        .collect())
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean invocation probability of the trajectories whose reward reaches the
/// group median, clamped to `[0.05, 0.95]`.
pub fn adaptive_ref(rewards: &[f64], p_bars: &[f64]) -> Result<f64, TrainingError> {
    if rewards.is_empty() || rewards.len() != p_bars.len() {
        return Err(TrainingError::Data(format!(
            "{} rewards for {} invocation means",
            rewards.len(),
            p_bars.len()
        )));
    }
    let med = median(rewards);
    let top: Vec<f64> = rewards
        .iter()
        .zip(p_bars)
        .filter(|(r, _)| **r >= med)
        .map(|(_, p)| *p)
        .collect();
    Ok((top.iter().sum::<f64>() / top.len() as f64).clamp(0.05, 0.95))
}

pub fn penalized_return(reward: f64, p_bar: f64, p_ref: f64, lambda: f64) -> f64 {
    reward - lambda * (p_bar - p_ref).max(0.0)
}

/// Per-group statistics from one batch of rollouts.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub p_ref: f64,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

pub fn group_stats(group: &[Rollout], cfg: &RlConfig) -> Result<GroupStats, TrainingError> {
    if let Some(r) = group.iter().skip(1).find(|r| r.spec != group[0].spec) {
        return Err(TrainingError::Data(format!("group mixes tasks {} and {}", group[0].spec, r.spec)));
    }
    let rewards: Vec<f64> = group.iter().map(|r| r.trajectory.reward).collect();
    let p_bars: Vec<f64> = group.iter().map(Rollout::p_bar).collect();
    let p_ref = adaptive_ref(&rewards, &p_bars)?;
    let returns: Vec<f64> = rewards
        .iter()
        .zip(&p_bars)
        .map(|(&r, &p)| penalized_return(r, p, p_ref, cfg.lambda))
        .collect();
    let advantages = grpo_advantages(&returns, cfg.advantage_clip)?;
    Ok(GroupStats {
        p_ref,
        returns,
        advantages,
    })
}

/// Log-probability of the logged action and the policy entropy at every
/// checkpoint of `rollout`, recomputed on the tape.
pub fn policy_terms(model: &LatentMorph, g: &mut Graph, rollout: &Rollout) -> Result<Vec<(NodeId, NodeId)>, TrainingError> {
    let mask = model.invoker.mask;
    let p = &rollout_prompt(model, rollout)?;
    let mut history = Vec::new();
    let mut out = Vec::with_capacity(rollout.log.len());
    for entry in &rollout.log {
        let window = g.constant(entry.window.clone());
        let m = model.short.forward(g, window);
        let m_s = g.mean_rows(m);
        let (c, s) = state_tape(g, mask, m_s, p, entry.u, &history)?;
        history.push(c);
        let logit = model.invoker.logit(g, s);
        let neg = g.scale(logit, -1.0);
        let log_p = g.unary(logit, Unary::LogSigmoid);
        let log_q = g.unary(neg, Unary::LogSigmoid);
        let log_pi = match entry.action {
            Action::Reason => log_p,
            Action::Continue => log_q,
        };
        let p_n = g.unary(logit, Unary::Sigmoid);
        let q_n = g.unary(neg, Unary::Sigmoid);
        let a = g.mul(p_n, log_p);
        let b = g.mul(q_n, log_q);
        let h = g.add(a, b);
        let h = g.scale(h, -1.0);
        out.push((log_pi, h));
    }
    Ok(out)
}

fn rollout_prompt(model: &LatentMorph, rollout: &Rollout) -> Result<Vec<f64>, TrainingError> {
    Ok(model.generator.embed_prompt(&rollout.spec)?.pooled)
}

/// `−(1/N) Σ_τ Σ_t (A_τ · log π(a_t|s_t) + coef · H_t)` over `N` trajectories.
pub fn grpo_loss(
    model: &LatentMorph,
    g: &mut Graph,
    rollouts: &[&Rollout],
    advantages: &[f64],
    entropy_coef: f64,
) -> Result<NodeId, TrainingError> {
    if rollouts.len() != advantages.len() {
        return Err(TrainingError::Data("one advantage per trajectory required".into()));
    }
    let mut terms = Vec::new();
    for (r, &a) in rollouts.iter().zip(advantages) {
        if r.log.len() != r.trajectory.invocations.len() {
            return Err(TrainingError::Data(format!(
                "trajectory {} logged {} of {} checkpoint states",
                r.trajectory.seed,
                r.log.len(),
                r.trajectory.invocations.len()
            )));
        }
        for (log_pi, h) in policy_terms(model, g, r)? {
            let pg = g.scale(log_pi, a);
            let bonus = g.scale(h, entropy_coef);
            terms.push(g.add(pg, bonus));
        }
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let all = if terms.len() == 1 { terms[0] } else { g.concat_cols(&terms) };
    let total = g.sum(all);
    Ok(g.scale(total, -1.0 / rollouts.len() as f64))
}

/// One policy update of the RL parameter group from complete groups.
pub fn grpo_step(
    model: &mut LatentMorph,
    opt: &mut AdamW,
    groups: &[Vec<Rollout>],
    cfg: &RlConfig,
) -> Result<(f64, Vec<GroupStats>), TrainingError> {
    let stats: Vec<GroupStats> = groups.iter().map(|g| group_stats(g, cfg)).collect::<Result<_, _>>()?;
    let rollouts: Vec<&Rollout> = groups.iter().flatten().collect();
    let advantages: Vec<f64> = stats.iter().flat_map(|s| s.advantages.iter().copied()).collect();
    let mut g = Graph::with_trainable(Stage::Rl.filter());
    let loss = grpo_loss(model, &mut g, &rollouts, &advantages, cfg.entropy_coef)?;
    let value = g.value(loss).data()[0];
    if g.needs_grad(loss) {
        g.backward(loss)?.accumulate_into(model);
    }
    opt.step(model, &Stage::Rl.filter());
    Ok((value, stats))
}
