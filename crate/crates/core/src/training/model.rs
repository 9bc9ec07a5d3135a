use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainingError;
use crate::condenser::{Condenser, CondenserConfig, MemoryKind};
use crate::control::{InjectionMode, Shaper, Translator, TranslatorInputs};
use crate::generator::{Generator, GeneratorConfig};
use crate::impl_module;
use crate::invoker::{InvokerPolicy, SignalMask};
use crate::numerics::checkpoint;
use crate::reasoner::Reasoner;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InvokerConfig {
    /// Checkpoint interval in generated tokens.
    pub w: usize,
    pub signals: SignalMask,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for InvokerConfig {
    fn default() -> Self {
        Self {
            w: 64,
            signals: SignalMask::ALL,
            hidden: 32,
            layers: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub short: CondenserConfig,
    pub long: CondenserConfig,
    pub reasoner_layers: usize,
    pub reasoner_heads: usize,
    pub j: usize,
    pub max_scale: f64,
    pub translator_inputs: TranslatorInputs,
    pub injection: InjectionMode,
    pub invoker: InvokerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            short: CondenserConfig {
                tokens: 4,
                heads: 4,
                chunk: 64,
            },
            long: CondenserConfig {
                tokens: 8,
                heads: 8,
                chunk: 64,
            },
            reasoner_layers: 2,
            reasoner_heads: 4,
            j: 4,
            max_scale: 1.0,
            translator_inputs: TranslatorInputs::default(),
            injection: InjectionMode::Inject,
            invoker: InvokerConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        self.generator.validate()?;
        let bad = |m: String| Err(TrainingError::Config(m));
        if self.invoker.w == 0 {
            return bad("checkpoint interval w must be positive".into());
        }
        if self.j == 0 {
            return bad("shaper needs at least one control token".into());
        }
        if self.invoker.signals.dim() == 0 {
            return bad("invoker needs at least one signal".into());
        }
        Ok(())
    }
}

/// Parameter groups trained by each stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Sft,
    Rl,
}

impl Stage {
    pub fn owns(self, name: &str) -> bool {
        const SFT: [&str; 4] = ["cond_long.", "reasoner.", "translator.", "shaper."];
        const RL: [&str; 2] = ["invoker.", "cond_short."];
        match self {
            Stage::Pretrain => name.starts_with("gen."),
            Stage::Sft => SFT.iter().any(|p| name.starts_with(p)),
            Stage::Rl => RL.iter().any(|p| name.starts_with(p)),
        }
    }

    pub fn filter(self) -> impl Fn(&str) -> bool + Clone + 'static {
        move |name: &str| self.owns(name)
    }
}

/// The generator together with every control-loop module.
#[derive(Clone, Debug)]
pub struct LatentMorph {
    pub cfg: ModelConfig,
    pub generator: Generator,
    pub short: Condenser,
    pub long: Condenser,
    pub invoker: InvokerPolicy,
    pub reasoner: Reasoner,
    pub translator: Translator,
    pub shaper: Shaper,
}

impl_module!(LatentMorph { generator, short, long, invoker, reasoner, translator, shaper });

impl LatentMorph {
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self, TrainingError> {
        cfg.validate()?;
        let g = &cfg.generator;
        let d = g.d_model;
        Ok(Self {
            generator: Generator::new(g.clone(), rng)?,
            short: Condenser::new("cond_short", MemoryKind::Short, d, cfg.short, rng)?,
            long: Condenser::new("cond_long", MemoryKind::Long, d, cfg.long, rng)?,
            invoker: InvokerPolicy::new(cfg.invoker.signals, cfg.invoker.hidden, cfg.invoker.layers, rng),
            reasoner: Reasoner::new(d, cfg.reasoner_heads, cfg.reasoner_layers, rng)?,
            translator: Translator::new(d, cfg.max_scale, cfg.translator_inputs, rng),
            shaper: Shaper::new(d, cfg.j, g.layers, rng),
            cfg,
        })
    }

    /// Checksum of the parameters one stage owns.
    pub fn stage_checksum(&self, stage: Stage) -> u64 {
        use crate::numerics::Module;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        self.visit(&mut |p| {
            if stage.owns(&p.name) {
                for v in p.tensor.data() {
                    h = (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3);
                }
            }
        });
        h
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainingError> {
        Ok(checkpoint::save(self, path)?)
    }

    pub fn load(&mut self, path: &Path) -> Result<(), TrainingError> {
        Ok(checkpoint::load(self, path)?)
    }

    /// Copies the generator weights of `other` into `self`.
    pub fn adopt_generator(&mut self, other: &Generator) -> Result<(), TrainingError> {
        if other.cfg != self.cfg.generator {
            return Err(TrainingError::Config("generator configurations differ".into()));
        }
        self.generator = other.clone();
        Ok(())
    }
}
