use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LatentMorph, Stage, TrainingError};
use crate::control::InjectionMode;
use crate::generator::{Generator, PromptEmbedding};
use crate::numerics::{AdamW, Graph, NodeId, Tensor};
use crate::synthtask::{gen_task, witness, TaskSpec, Tier};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub tiers: Vec<Tier>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 8,
            lr: 3e-3,
            tiers: vec![Tier::Easy, Tier::Medium],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub pairs: usize,
    /// Injection step range as fractions of the canvas length.
    pub k_range: [f64; 2],
    pub tiers: Vec<Tier>,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            batch: 16,
            epochs: 2,
            pairs: 64,
            k_range: [0.25, 0.75],
            tiers: Tier::ALL.to_vec(),
        }
    }
}

impl SftConfig {
    /// Inclusive bounds `[⌈lo·n⌉, ⌊hi·n⌋]` on the injection step.
    pub fn k_bounds(&self, seq_len: usize) -> Result<(usize, usize), TrainingError> {
        let n = seq_len as f64;
        let lo = (self.k_range[0] * n).ceil() as usize;
        let hi = (self.k_range[1] * n).floor() as usize;
        if lo < 1 || hi >= seq_len || lo > hi {
            return Err(TrainingError::Config(format!(
                "injection range {:?} gives no valid step in 1..{seq_len}",
                self.k_range
            )));
        }
        Ok((lo, hi))
    }
}

/// A supervised pair plus the frozen generator's pass over it.
#[derive(Clone, Debug)]
pub struct SftPair {
    pub spec: TaskSpec,
    pub prompt: PromptEmbedding,
    pub target: Vec<usize>,
    /// Frozen final hidden rows `[|X|×d]`.
    pub hidden: Tensor,
    /// Frozen per-step negative log-likelihood of the target.
    pub nll: Vec<f64>,
}

/// Witness pairs for tasks `seed, seed + 1, …`, cycling through `tiers`.
pub fn task_stream(seed: u64, tiers: &[Tier], n: usize, gen: &Generator) -> Result<Vec<TaskSpec>, TrainingError> {
    if tiers.is_empty() {
        return Err(TrainingError::Config("no task tiers configured".into()));
    }
    let task = gen.cfg.task();
    (0..n)
        .map(|i| Ok(gen_task(seed + i as u64, tiers[i % tiers.len()], &task)?))
        .collect()
}

fn teacher_pass(gen: &Generator, prompt: &PromptEmbedding, target: &[usize]) -> Result<(Tensor, Vec<f64>), TrainingError> {
    let mut g = Graph::new();
    let p = g.constant(prompt.tokens.clone());
    let out = gen.forward_tape(&mut g, p, &gen.teacher_inputs(target), &[])?;
    g.check()?;
    let logits = g.value(out.logits);
    let nll = target
        .iter()
        .enumerate()
        .map(|(t, &x)| {
            let row = logits.row_slice(t);
            crate::numerics::log_sum_exp(row) - row[x]
        })
        .collect();
    Ok((g.value(out.hidden).clone(), nll))
}

pub fn sft_corpus(gen: &Generator, specs: &[TaskSpec]) -> Result<Vec<SftPair>, TrainingError> {
    let task = gen.cfg.task();
    specs
        .iter()
        .map(|spec| {
            let prompt = gen.embed_prompt(spec)?;
            let target = witness(spec, &task);
            let (hidden, nll) = teacher_pass(gen, &prompt, &target)?;
            Ok(SftPair {
                spec: spec.clone(),
                prompt,
                target,
                hidden,
                nll,
            })
        })
        .collect()
}

/// Teacher-forced cross-entropy of the generator, summed over steps.
pub fn generator_nll(gen: &Generator, g: &mut Graph, prompt: &PromptEmbedding, target: &[usize]) -> Result<NodeId, TrainingError> {
    let ids = &prompt.ids;
    let p = gen.prompt_rows(g, ids);
    let out = gen.forward_tape(g, p, &gen.teacher_inputs(target), &[])?;
    let targets: Vec<Option<usize>> = target.iter().map(|&t| Some(t)).collect();
    Ok(g.nll(out.logits, &targets))
}

/// Summed cross-entropy over all `|X|` steps with a control signal built
/// from the first `k` frozen hidden rows and applied from step `k` on.
pub fn sft_loss(model: &LatentMorph, g: &mut Graph, pair: &SftPair, k: usize) -> Result<NodeId, TrainingError> {
    let gen = &model.generator;
    let n = pair.target.len();
    if n != gen.cfg.seq_len {
        return Err(TrainingError::Data(format!("target has {n} tokens, canvas is {}", gen.cfg.seq_len)));
    }
    if k == 0 || k >= n {
        return Err(TrainingError::Data(format!("injection step {k} outside 1..{n}")));
    }
    let h = g.constant(pair.hidden.slice_rows(0, k));
    let m_l = model.long.condense_long_tape(g, h)?;
    let prompt = g.constant(pair.prompt.tokens.clone());
    let z = model.reasoner.forward(g, m_l, prompt);
    let m_pool = g.mean_rows(m_l);
    let p_pool = g.mean_rows(prompt);
    let (_, c) = model.translator.forward(g, z, m_pool, p_pool);
    let inputs = gen.teacher_inputs(&pair.target);
    match model.cfg.injection {
        InjectionMode::Inject => {
            let ctrl = model.shaper.forward(g, c, k);
            let out = gen.forward_tape(g, prompt, &inputs, &[ctrl])?;
            let targets: Vec<Option<usize>> = pair.target.iter().map(|&t| Some(t)).collect();
            Ok(g.nll(out.logits, &targets))
        }
        InjectionMode::Replace => {
            let rows = vec![c; gen.cfg.prompt_len];
            let rows = g.concat_rows(&rows);
            let out = gen.forward_tape(g, rows, &inputs, &[])?;
            let targets: Vec<Option<usize>> = pair
                .target
                .iter()
                .enumerate()
                .map(|(t, &x)| (t >= k).then_some(x))
                .collect();
            let late = g.nll(out.logits, &targets);
            let early: f64 = pair.nll[..k].iter().sum();
            let early = g.constant(Tensor::scalar(early));
            Ok(g.add(late, early))
        }
    }
}

/// Mean-per-token loss over `batch`; accumulates gradients of the SFT
/// parameter group and takes one optimizer step.
pub fn sft_step(
    model: &mut LatentMorph,
    opt: &mut AdamW,
    batch: &[(&SftPair, usize)],
) -> Result<f64, TrainingError> {
    if batch.is_empty() {
        return Err(TrainingError::Data("empty SFT batch".into()));
    }
    let mut total = 0.0;
    let norm = 1.0 / (batch.len() * model.generator.cfg.seq_len) as f64;
    for &(pair, k) in batch {
        let mut g = Graph::with_trainable(Stage::Sft.filter());
        let l = sft_loss(model, &mut g, pair, k)?;
        let l = g.scale(l, norm);
        total += g.value(l).data()[0];
        g.backward(l)?.accumulate_into(model);
    }
    opt.step(model, &Stage::Sft.filter());
    Ok(total)
}

/// One logged SFT optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SftLogRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub ks: String,
}

/// Epoch-shuffled SFT over `pairs`; the injection step of each sample is
/// drawn uniformly from the configured range.
pub fn train_sft(
    model: &mut LatentMorph,
    cfg: &SftConfig,
    pairs: &[SftPair],
    seed: u64,
) -> Result<Vec<SftLogRow>, TrainingError> {
    let (lo, hi) = cfg.k_bounds(model.generator.cfg.seq_len)?;
    if cfg.batch == 0 {
        return Err(TrainingError::Config("SFT batch must be positive".into()));
    }
    let mut opt = AdamW::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<(&SftPair, usize)> = chunk.iter().map(|&i| (&pairs[i], rng.gen_range(lo..=hi))).collect();
            let loss = sft_step(model, &mut opt, &batch)?;
            let ks: Vec<String> = batch.iter().map(|(_, k)| k.to_string()).collect();
            log.push(SftLogRow {
                step: log.len(),
                epoch,
                loss,
                ks: ks.join(";"),
            });
        }
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainLogRow {
    pub step: usize,
    pub loss: f64,
}

/// Teacher-forced training of the generator alone on witness canvases.
pub fn pretrain_generator(gen: &mut Generator, cfg: &PretrainConfig, seed: u64) -> Result<Vec<PretrainLogRow>, TrainingError> {
    if cfg.batch == 0 {
        return Err(TrainingError::Config("pretraining batch must be positive".into()));
    }
    let specs = task_stream(seed, &cfg.tiers, cfg.steps * cfg.batch, gen)?;
    let task = gen.cfg.task();
    let mut opt = AdamW::new(cfg.lr, 0.9, 0.999, 0.0);
    let norm = 1.0 / (cfg.batch * gen.cfg.seq_len) as f64;
    let mut log = Vec::with_capacity(cfg.steps);
    for (step, chunk) in specs.chunks(cfg.batch).enumerate() {
        let mut total = 0.0;
        for spec in chunk {
            let prompt = gen.embed_prompt(spec)?;
            let target = witness(spec, &task);
            let mut g = Graph::with_trainable(Stage::Pretrain.filter());
            let l = generator_nll(gen, &mut g, &prompt, &target)?;
            let l = g.scale(l, norm);
            total += g.value(l).data()[0];
            g.backward(l)?.accumulate_into(gen);
        }
        opt.step(gen, &Stage::Pretrain.filter());
        log.push(PretrainLogRow { step, loss: total });
    }
    Ok(log)
}
