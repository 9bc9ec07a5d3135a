use std::collections::BTreeMap;

use serde::Serialize;

use super::pipeline::{eval_task, evaluate, init_model, run_pretrain, run_rl, run_sft};
use super::{ExperimentConfig, HarnessError};
use crate::control::{InjectionMode, TranslatorInputs};
use crate::invoker::SignalMask;
use crate::numerics::{Module, Tensor};
use crate::synthtask::SchedulerKind;
use crate::training::{InvokerConfig, LatentMorph, ModelConfig, Stage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ArmGroup {
    Invoker,
    Memory,
    Control,
    Injection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub group: ArmGroup,
    pub setting: String,
    pub model: ModelConfig,
}

/// Signal drops × windows, then memory sizes, translator input drops and
/// the two injection modes.
pub fn ablation_arms(cfg: &ExperimentConfig) -> Vec<Arm> {
    let base = &cfg.model;
    let mut arms = Vec::new();
    let masks = std::iter::once(SignalMask::ALL).chain((0..4).map(SignalMask::without));
    let masks: Vec<SignalMask> = masks.collect();
    for &w in &cfg.ablate.windows {
        for &signals in &masks {
            let mut model = base.clone();
            model.invoker = InvokerConfig { w, signals, ..base.invoker.clone() };
            arms.push(Arm {
                group: ArmGroup::Invoker,
                setting: format!("w={w} signals={signals}"),
                model,
            });
        }
    }
    for &n in &cfg.ablate.short_tokens {
        let mut model = base.clone();
        model.short.tokens = n;
        arms.push(Arm { group: ArmGroup::Memory, setting: format!("n_s={n}"), model });
    }
    for &n in &cfg.ablate.long_tokens {
        let mut model = base.clone();
        model.long.tokens = n;
        arms.push(Arm { group: ArmGroup::Memory, setting: format!("n_l={n}"), model });
    }
    for (setting, inputs) in [
        ("without memory", TranslatorInputs { memory: false, prompt: true }),
        ("without prompt", TranslatorInputs { memory: true, prompt: false }),
    ] {
        let mut model = base.clone();
        model.translator_inputs = inputs;
        arms.push(Arm { group: ArmGroup::Control, setting: setting.into(), model });
    }
    for mode in [InjectionMode::Inject, InjectionMode::Replace] {
        let mut model = base.clone();
        model.injection = mode;
        let setting = match mode {
            InjectionMode::Inject => "shaper",
            InjectionMode::Replace => "replace",
        };
        arms.push(Arm { group: ArmGroup::Injection, setting: setting.into(), model });
    }
    arms
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub arm: usize,
    pub group: ArmGroup,
    pub setting: String,
    pub mean_reward: f64,
    pub mean_invocations: f64,
    pub mean_p_bar: f64,
    /// Digest of the evaluation task sequence.
    pub tasks: String,
}

fn copy_stage(from: &LatentMorph, to: &mut LatentMorph, stage: Stage) {
    let mut saved: BTreeMap<String, Tensor> = BTreeMap::new();
    from.visit(&mut |p| {
        if stage.owns(&p.name) {
            saved.insert(p.name.clone(), p.tensor.clone());
        }
    });
    to.visit_mut(&mut |p| {
        if let Some(t) = saved.get(&p.name) {
            p.tensor = t.clone();
        }
    });
}

/// The part of a model configuration that SFT depends on.
fn sft_key(model: &ModelConfig) -> Result<String, HarnessError> {
    let mut m = model.clone();
    m.invoker = InvokerConfig::default();
    m.short = ModelConfig::default().short;
    toml::to_string(&m).map_err(|e| HarnessError::Config(e.to_string()))
}

fn fnv(text: &str, h: &mut u64) {
    for b in text.bytes() {
        *h = (*h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
}

/// Runs every arm through SFT, RL and learned-policy evaluation. The
/// generator is pretrained once and shared; arms whose SFT-relevant
/// configuration coincides share one SFT run.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>, HarnessError> {
    let mut base = init_model(cfg)?;
    run_pretrain(cfg, &mut base)?;
    let mut sft_cache: BTreeMap<String, LatentMorph> = BTreeMap::new();
    let mut rows = Vec::new();
    for (i, arm) in ablation_arms(cfg).into_iter().enumerate() {
        let mut arm_cfg = cfg.clone();
        arm_cfg.model = arm.model.clone();
        let mut model = init_model(&arm_cfg)?;
        model.adopt_generator(&base.generator)?;
        let key = sft_key(&arm.model)?;
        match sft_cache.get(&key) {
            Some(done) => copy_stage(done, &mut model, Stage::Sft),
            None => {
                run_sft(&arm_cfg, &mut model)?;
                sft_cache.insert(key, model.clone());
            }
        }
        run_rl(&arm_cfg, &mut model)?;

        let (mut reward, mut inv, mut p_bar) = (0.0, 0.0, 0.0);
        let mut digest = 0xcbf2_9ce4_8422_2325;
        let tiers = &cfg.ablate.tiers;
        for &tier in tiers {
            let out = evaluate(&arm_cfg, &model, SchedulerKind::Learned, tier, cfg.ablate.tasks)?;
            reward += out.row.mean_reward;
            inv += out.row.mean_invocations;
            p_bar += out.row.mean_p_bar;
            for j in 0..cfg.ablate.tasks {
                fnv(&eval_task(&arm_cfg, &model, tier, j)?.to_string(), &mut digest);
            }
        }
        let n = tiers.len() as f64;
        rows.push(AblationRow {
            arm: i,
            group: arm.group,
            setting: arm.setting,
            mean_reward: reward / n,
            mean_invocations: inv / n,
            mean_p_bar: p_bar / n,
            tasks: format!("{digest:016x}"),
        });
    }
    Ok(rows)
}
