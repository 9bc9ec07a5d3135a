use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ExperimentConfig, HarnessError};
use crate::generator::{generate, NoopController, TrajectoryRecord};
use crate::invoker::Mode;
use crate::synthtask::{gen_task, SchedulerKind, TaskSpec, Tier};
use crate::training::{
    derive_seed, pretrain_generator, rollout, rollout_with, sft_corpus, task_stream, train_rl, train_sft, LatentMorph,
    Policy, PretrainLogRow, RlLogRow, SftLogRow,
};

const INIT: u64 = 0;
const SFT: u64 = 2;
const RL: u64 = 3;
const EVAL: u64 = 4;

pub fn init_model(cfg: &ExperimentConfig) -> Result<LatentMorph, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, INIT));
    Ok(LatentMorph::new(cfg.model.clone(), &mut rng)?)
}

pub fn run_pretrain(cfg: &ExperimentConfig, model: &mut LatentMorph) -> Result<Vec<PretrainLogRow>, HarnessError> {
    Ok(pretrain_generator(&mut model.generator, &cfg.pretrain, cfg.tasks.pretrain)?)
}

pub fn run_sft(cfg: &ExperimentConfig, model: &mut LatentMorph) -> Result<Vec<SftLogRow>, HarnessError> {
    let specs = task_stream(cfg.tasks.sft, &cfg.sft.tiers, cfg.sft.pairs, &model.generator)?;
    let pairs = sft_corpus(&model.generator, &specs)?;
    Ok(train_sft(model, &cfg.sft, &pairs, derive_seed(cfg.seed, SFT))?)
}

pub fn run_rl(cfg: &ExperimentConfig, model: &mut LatentMorph) -> Result<Vec<RlLogRow>, HarnessError> {
    Ok(train_rl(model, &cfg.rl, &cfg.rl_tiers, cfg.tasks.rl, derive_seed(cfg.seed, RL))?)
}

/// Held-out task `i` of a tier.
pub fn eval_task(cfg: &ExperimentConfig, model: &LatentMorph, tier: Tier, i: usize) -> Result<TaskSpec, HarnessError> {
    Ok(gen_task(cfg.tasks.eval + i as u64, tier, &model.generator.cfg.task())?)
}

/// Sampling seed of evaluation trajectory `i`; shared by every scheduler
/// so that comparisons are paired.
pub fn eval_seed(cfg: &ExperimentConfig, i: usize) -> u64 {
    derive_seed(derive_seed(cfg.seed, EVAL), i as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub scheduler: SchedulerKind,
    pub tier: Tier,
    pub trajectories: usize,
    pub mean_reward: f64,
    pub mean_invocations: f64,
    pub mean_p_bar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalTrajectory {
    pub scheduler: SchedulerKind,
    pub tier: Tier,
    pub task: String,
    #[serde(flatten)]
    pub record: TrajectoryRecord,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub row: EvalRow,
    pub trajectories: Vec<EvalTrajectory>,
    pub wall: Duration,
    pub monitor: Duration,
}

impl EvalOutcome {
    pub fn secs_per_trajectory(&self) -> f64 {
        self.wall.as_secs_f64() / self.row.trajectories.max(1) as f64
    }
}

pub fn evaluate(
    cfg: &ExperimentConfig,
    model: &LatentMorph,
    kind: SchedulerKind,
    tier: Tier,
    n: usize,
) -> Result<EvalOutcome, HarnessError> {
    let start = Instant::now();
    let mut monitor = Duration::ZERO;
    let mut trajectories = Vec::with_capacity(n);
    let (mut reward, mut inv, mut p_bar) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let spec = eval_task(cfg, model, tier, i)?;
        let r = rollout_with(model, &spec, kind, Mode::Eval, eval_seed(cfg, i), cfg.eval.temperature)?;
        reward += r.trajectory.reward;
        inv += r.trajectory.num_invocations() as f64;
        p_bar += r.p_bar();
        monitor += r.trajectory.timing.monitor;
        trajectories.push(EvalTrajectory {
            scheduler: kind,
            tier,
            task: spec.to_string(),
            record: r.trajectory.record(),
        });
    }
    let m = n.max(1) as f64;
    Ok(EvalOutcome {
        row: EvalRow {
            scheduler: kind,
            tier,
            trajectories: n,
            mean_reward: reward / m,
            mean_invocations: inv / m,
            mean_p_bar: p_bar / m,
        },
        trajectories,
        wall: start.elapsed(),
        monitor,
    })
}

/// Wall-clock of `n` greedy trajectories without a controller and with the
/// monitor running at every checkpoint but never invoking. Runs are
/// interleaved so that drift in machine load hits both sides alike.
pub fn monitoring_overhead(
    cfg: &ExperimentConfig,
    model: &LatentMorph,
    tier: Tier,
    n: usize,
) -> Result<(Duration, Duration), HarnessError> {
    let w = model.cfg.invoker.w;
    let (mut base, mut monitored) = (Duration::ZERO, Duration::ZERO);
    for i in 0..n {
        let spec = eval_task(cfg, model, tier, i)?;
        let prompt = model.generator.embed_prompt(&spec)?;
        let seed = eval_seed(cfg, i);

        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        generate(&model.generator, &prompt, w, &mut NoopController, &mut rng, 0.0)?;
        base += start.elapsed();

        let start = Instant::now();
        let r = rollout(model, &spec, &prompt, Policy::MonitorOnly, seed, 0.0)?;
        monitored += start.elapsed();
        if r.trajectory.num_invocations() != 0 {
            return Err(HarnessError::Oracle("monitor-only run invoked the reasoner".into()));
        }
    }
    Ok((base, monitored))
}
