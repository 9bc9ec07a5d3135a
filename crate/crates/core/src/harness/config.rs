use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::synthtask::{SchedulerKind, Tier};
use crate::training::{ModelConfig, PretrainConfig, RlConfig, SftConfig};

/// First task seed of each disjoint task stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSeeds {
    pub pretrain: u64,
    pub sft: u64,
    pub rl: u64,
    pub eval: u64,
}

impl Default for TaskSeeds {
    fn default() -> Self {
        Self {
            pretrain: 0,
            sft: 1_000_000,
            rl: 2_000_000,
            eval: 9_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Trajectories per tier and scheduler.
    pub tasks: usize,
    pub tiers: Vec<Tier>,
    pub schedulers: Vec<SchedulerKind>,
    pub temperature: f64,
    pub plot: bool,
    pub trajectories: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tasks: 200,
            tiers: Tier::ALL.to_vec(),
            schedulers: vec![
                SchedulerKind::Learned,
                SchedulerKind::Fixed(1),
                SchedulerKind::Fixed(2),
                SchedulerKind::Random(0.5),
                SchedulerKind::None,
            ],
            temperature: 0.0,
            plot: false,
            trajectories: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    pub windows: Vec<usize>,
    pub short_tokens: Vec<usize>,
    pub long_tokens: Vec<usize>,
    /// Evaluation trajectories per tier for every arm.
    pub tasks: usize,
    pub tiers: Vec<Tier>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            windows: vec![32, 64, 128],
            short_tokens: vec![2, 8],
            long_tokens: vec![4, 16],
            tasks: 50,
            tiers: Tier::ALL.to_vec(),
        }
    }
}

/// Checkpoint locations; unset paths resolve inside the output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointPaths {
    pub sft: Option<PathBuf>,
    pub rl: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Task tiers sampled during RL, cycled group by group.
    pub rl_tiers: Vec<Tier>,
    pub tasks: TaskSeeds,
    pub checkpoints: CheckpointPaths,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub sft: SftConfig,
    pub rl: RlConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            rl_tiers: Tier::ALL.to_vec(),
            tasks: TaskSeeds::default(),
            checkpoints: CheckpointPaths::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            sft: SftConfig::default(),
            rl: RlConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        self.validate()?;
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_toml()?).map_err(|e| HarnessError::io(path, e))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let t = &self.tasks;
        if [self.seed, t.pretrain, t.sft, t.rl, t.eval].iter().any(|&s| s > i64::MAX as u64) {
            return Err(HarnessError::Config(format!("seeds must not exceed {}", i64::MAX)));
        }
        self.model.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.sft
            .k_bounds(self.model.generator.seq_len)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if self.rl_tiers.is_empty() || self.sft.tiers.is_empty() || self.pretrain.tiers.is_empty() {
            return bad("every stage needs at least one task tier");
        }
        if self.eval.tiers.is_empty() || self.ablate.tiers.is_empty() {
            return bad("evaluation needs at least one task tier");
        }
        if self.rl.group_size < 2 || self.rl.groups_per_step == 0 {
            return bad("GRPO needs groups of at least 2 and one group per step");
        }
        if self.ablate.windows.contains(&0) {
            return bad("ablation window sizes must be positive");
        }
        if self.ablate.short_tokens.contains(&0) || self.ablate.long_tokens.contains(&0) {
            return bad("ablation memory sizes must be positive");
        }
        Ok(())
    }

    fn resolve(&self, path: &Option<PathBuf>, name: &str) -> PathBuf {
        path.clone().unwrap_or_else(|| self.out.join(name))
    }

    pub fn sft_checkpoint(&self) -> PathBuf {
        self.resolve(&self.checkpoints.sft, "sft.lmck")
    }

    pub fn rl_checkpoint(&self) -> PathBuf {
        self.resolve(&self.checkpoints.rl, "rl.lmck")
    }

    /// Model evaluated by `eval`; the RL checkpoint unless overridden.
    pub fn eval_checkpoint(&self) -> PathBuf {
        self.checkpoints.eval.clone().unwrap_or_else(|| self.rl_checkpoint())
    }
}
