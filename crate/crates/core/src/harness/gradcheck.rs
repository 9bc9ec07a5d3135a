use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::HarnessError;
use crate::condenser::CondenserConfig;
use crate::generator::GeneratorConfig;
use crate::invoker::Mode;
use crate::numerics::{grad_check, GradCheckReport, Graph, Module, NodeId, Tensor, Unary};
use crate::synthtask::{gen_task, Tier};
use crate::training::{
    derive_seed, grpo_loss, rollout, sft_corpus, sft_loss, task_stream, InvokerConfig, LatentMorph, ModelConfig,
    Policy, Rollout, Stage, TrainingError,
};

pub const GRADCHECK_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

/// The d=16 model every gradient check runs on.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        generator: GeneratorConfig {
            vocab_size: 16,
            d_model: 16,
            layers: 2,
            heads: 2,
            seq_len: 32,
            prompt_len: 8,
            max_count: 2,
            ..Default::default()
        },
        short: CondenserConfig { tokens: 4, heads: 2, chunk: 16 },
        long: CondenserConfig { tokens: 4, heads: 2, chunk: 16 },
        reasoner_heads: 2,
        j: 2,
        invoker: InvokerConfig { w: 8, hidden: 8, ..Default::default() },
        ..Default::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub component: String,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub entries: usize,
    pub passed: bool,
}

impl GradCheckRow {
    fn new(component: &str, r: GradCheckReport) -> Self {
        Self {
            component: component.into(),
            passed: r.max_rel_error <= GRADCHECK_TOL,
            max_rel_error: r.max_rel_error,
            worst_param: r.worst_param,
            entries: r.entries,
        }
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Replaces zero-initialised output projections with small random values
/// so that every parameter carries gradient.
fn wake<M: Module>(m: &mut M, rng: &mut ChaCha8Rng) {
    m.visit_mut(&mut |p| {
        if p.tensor.data().iter().all(|v| *v == 0.0) {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
    });
}

/// `Σ x ∘ r` for a fixed random `r`: a loss whose gradient is dense.
fn project(g: &mut Graph, x: NodeId, r: &Tensor) -> NodeId {
    let r = g.constant(r.clone());
    let y = g.mul(x, r);
    g.sum(y)
}

fn prefixed(prefix: &'static str) -> impl Fn(&str) -> bool + Clone + 'static {
    move |n: &str| n.starts_with(prefix)
}

fn rl_group(m: &LatentMorph, seed: u64, n: usize) -> Result<Vec<Rollout>, TrainingError> {
    let spec = gen_task(seed, Tier::Hard, &m.generator.cfg.task())?;
    let prompt = m.generator.embed_prompt(&spec)?;
    (0..n)
        .map(|j| rollout(m, &spec, &prompt, Policy::Learned(Mode::Train), derive_seed(seed, j as u64), 1.0))
        .collect()
}

/// Finite-difference checks of every trainable module of the control loop
/// at a seeded random initialisation.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckRow>, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = LatentMorph::new(toy_config(), &mut rng)?;
    wake(&mut m, &mut rng);
    let d = m.generator.d();
    let mut rows = Vec::new();

    let window = random(&mut rng, 8, d);
    let r = random(&mut rng, m.cfg.short.tokens, d);
    let rep = grad_check(&mut m, prefixed("cond_short."), EPS, |m: &LatentMorph, g: &mut Graph| {
        let h = g.constant(window.clone());
        let out = m.short.forward(g, h);
        Ok::<_, TrainingError>(project(g, out, &r))
    })?;
    rows.push(GradCheckRow::new("short_condenser", rep));

    let history = random(&mut rng, 40, d);
    let r = random(&mut rng, m.cfg.long.tokens, d);
    let rep = grad_check(&mut m, prefixed("cond_long."), EPS, |m: &LatentMorph, g: &mut Graph| {
        let h = g.constant(history.clone());
        let out = m.long.condense_long_tape(g, h)?;
        Ok::<_, TrainingError>(project(g, out, &r))
    })?;
    rows.push(GradCheckRow::new("long_condenser", rep));

    let memory = random(&mut rng, m.cfg.long.tokens, d);
    let prompt = random(&mut rng, m.generator.cfg.prompt_len, d);
    let r = random(&mut rng, 1, d);
    let rep = grad_check(&mut m, prefixed("reasoner."), EPS, |m: &LatentMorph, g: &mut Graph| {
        let ml = g.constant(memory.clone());
        let p = g.constant(prompt.clone());
        let z = m.reasoner.forward(g, ml, p);
        Ok::<_, TrainingError>(project(g, z, &r))
    })?;
    rows.push(GradCheckRow::new("reasoner", rep));

    let inputs: Vec<Tensor> = (0..3).map(|_| random(&mut rng, 1, d)).collect();
    let r = random(&mut rng, 1, d);
    let rep = grad_check(&mut m, prefixed("translator."), EPS, |m: &LatentMorph, g: &mut Graph| {
        let [z, ml, p] = [0, 1, 2].map(|i| g.constant(inputs[i].clone()));
        let (_, c) = m.translator.forward(g, z, ml, p);
        Ok::<_, TrainingError>(project(g, c, &r))
    })?;
    rows.push(GradCheckRow::new("translator", rep));

    let spec = gen_task(seed, Tier::Medium, &m.generator.cfg.task())?;
    let target: Vec<usize> = (0..m.generator.cfg.seq_len).map(|_| rng.gen_range(0..16)).collect();
    let signal = random(&mut rng, 1, d);
    let rep = grad_check(&mut m, prefixed("shaper."), EPS, |m: &LatentMorph, g: &mut Graph| {
        let prompt = m.generator.embed_prompt(&spec)?;
        let c = g.constant(signal.clone());
        let ctrl = m.shaper.forward(g, c, 12);
        let p = g.constant(prompt.tokens);
        let out = m.generator.forward_tape(g, p, &m.generator.teacher_inputs(&target), &[ctrl])?;
        let t: Vec<Option<usize>> = target.iter().map(|&x| Some(x)).collect();
        Ok::<_, TrainingError>(g.nll(out.logits, &t))
    })?;
    rows.push(GradCheckRow::new("shaper", rep));

    let dim = m.invoker.mask.dim();
    let state = random(&mut rng, 1, dim);
    let rep = grad_check(&mut m, prefixed("invoker."), EPS, |m: &LatentMorph, g: &mut Graph| {
        let s = g.constant(state.clone());
        let logit = m.invoker.logit(g, s);
        Ok::<_, TrainingError>(g.unary(logit, Unary::LogSigmoid))
    })?;
    rows.push(GradCheckRow::new("invoker_policy", rep));

    let group = rl_group(&m, seed, 3)?;
    let refs: Vec<&Rollout> = group.iter().collect();
    let adv = [0.7, -1.2, 0.5];
    let rep = grad_check(&mut m, Stage::Rl.filter(), EPS, |m: &LatentMorph, g: &mut Graph| {
        grpo_loss(m, g, &refs, &adv, 0.01)
    })?;
    rows.push(GradCheckRow::new("grpo_surrogate", rep));

    let specs = task_stream(seed, &[Tier::Hard], 1, &m.generator)?;
    let pair = sft_corpus(&m.generator, &specs)?.remove(0);
    let rep = grad_check(&mut m, Stage::Sft.filter(), EPS, |m: &LatentMorph, g: &mut Graph| {
        sft_loss(m, g, &pair, 12)
    })?;
    rows.push(GradCheckRow::new("sft_loss", rep));

    Ok(rows)
}
