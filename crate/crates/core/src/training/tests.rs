use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::condenser::CondenserConfig;
use crate::generator::{Action, GeneratorConfig, TapeControl};
use crate::numerics::{grad_check, Graph, Linear, Module, Tensor};
use crate::synthtask::{gen_task, Tier};

fn small() -> ModelConfig {
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
        invoker: InvokerConfig { w: 8, ..Default::default() },
        ..Default::default()
    }
}

fn model(seed: u64) -> LatentMorph {
    LatentMorph::new(small(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn corpus(m: &LatentMorph, n: usize) -> Vec<SftPair> {
    let specs = task_stream(100, &Tier::ALL, n, &m.generator).unwrap();
    sft_corpus(&m.generator, &specs).unwrap()
}

fn wake_shaper(m: &mut LatentMorph, rng: &mut ChaCha8Rng) {
    m.shaper.visit_mut(&mut |p| {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    });
}

#[test]
fn advantage_hand_cases() {
    assert_eq!(grpo_advantages(&[0.7; 5], 5.0).unwrap(), vec![0.0; 5]);
    let a = grpo_advantages(&[1.0, 3.0], 5.0).unwrap();
    assert!((a[0] + 1.0).abs() < 1e-7 && (a[1] - 1.0).abs() < 1e-7);
    let a = grpo_advantages(&[0.0, 0.0, 0.0, 100.0], 5.0).unwrap();
    assert!((a[3] - 3f64.sqrt()).abs() < 1e-6);
    let mut extreme = vec![0.0; 63];
    extreme.push(1e9);
    let a = grpo_advantages(&extreme, 5.0).unwrap();
    assert_eq!(a[63], 5.0);
    assert!(grpo_advantages(&[1.0], 5.0).is_err());
}

proptest! {
    #[test]
    fn advantages_are_standardised(rewards in prop::collection::vec(-3.0f64..3.0, 2..16)) {
        let a = grpo_advantages(&rewards, 5.0).unwrap();
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        prop_assert!(mean.abs() <= 1e-9);
        prop_assert!(a.iter().all(|v| (-5.0..=5.0).contains(v)));
        let spread = rewards.iter().cloned().fold(f64::MIN, f64::max) - rewards.iter().cloned().fold(f64::MAX, f64::min);
        if spread > 1e-3 && a.iter().all(|v| v.abs() < 5.0) {
            let std = (a.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
            prop_assert!((std - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn inactive_penalty_is_exact(r in -1.0f64..2.0, p in 0.0f64..1.0, gap in 0.0f64..1.0, lambda in 0.0f64..20.0) {
        let p_ref = (p + gap).min(1.0);
        prop_assert_eq!(penalized_return(r, p, p_ref, lambda), r);
    }
}

#[test]
fn reference_and_penalty_hand_cases() {
    let r = adaptive_ref(&[1.0, 2.0, 3.0, 4.0], &[0.9, 0.8, 0.2, 0.1]).unwrap();
    assert!((r - 0.15).abs() < 1e-12);
    let r = adaptive_ref(&[0.5; 4], &[0.2, 0.4, 0.6, 0.8]).unwrap();
    assert!((r - 0.5).abs() < 1e-12);
    assert_eq!(adaptive_ref(&[1.0, 2.0], &[0.5, 0.01]).unwrap(), 0.05);
    assert!((penalized_return(0.8, 0.6, 0.4, 0.2) - 0.76).abs() < 1e-15);
    assert_eq!(penalized_return(0.8, 0.9, 0.1, 0.0), 0.8);
}

#[test]
fn fresh_shaper_leaves_sft_loss_at_generator_loss() {
    let m = model(0);
    let pairs = corpus(&m, 3);
    for (i, pair) in pairs.iter().enumerate() {
        let mut g = Graph::new();
        let l = sft_loss(&m, &mut g, pair, 8 + 4 * i).unwrap();
        let mut g2 = Graph::new();
        let base = generator_nll(&m.generator, &mut g2, &pair.prompt, &pair.target).unwrap();
        assert_eq!(g.value(l).data()[0], g2.value(base).data()[0]);
        assert_eq!(g.value(l).data()[0], pair.nll.iter().sum::<f64>());
    }
}

#[test]
fn uniform_generator_costs_ln_v_per_token() {
    let mut m = model(1);
    m.generator.head = Linear::zeros("gen.head", 16, 16, false);
    let pairs = corpus(&m, 2);
    let mut opt = crate::numerics::AdamW::new(1e-4, 0.9, 0.999, 0.0);
    let loss = sft_step(&mut m, &mut opt, &[(&pairs[0], 10), (&pairs[1], 20)]).unwrap();
    assert!((loss - 16f64.ln()).abs() < 1e-12);
}

#[test]
fn injection_changes_only_later_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut m = model(2);
    wake_shaper(&mut m, &mut rng);
    let pair = &corpus(&m, 1)[0];
    let k = 12;
    let mut g = Graph::new();
    let prompt = g.constant(pair.prompt.tokens.clone());
    let c = g.constant(Tensor::row((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()));
    let ctrl: TapeControl = m.shaper.forward(&mut g, c, k);
    let inputs = m.generator.teacher_inputs(&pair.target);
    let with = m.generator.forward_tape(&mut g, prompt, &inputs, &[ctrl]).unwrap();
    let without = m.generator.forward_tape(&mut g, prompt, &inputs, &[]).unwrap();
    let (a, b) = (g.value(with.logits), g.value(without.logits));
    for t in 0..32 {
        let same = a.row_slice(t) == b.row_slice(t);
        assert_eq!(same, t < k, "step {t}");
    }
}

#[test]
fn degenerate_range_pins_the_injection_step() {
    let mut m = model(3);
    let pairs = corpus(&m, 4);
    let cfg = SftConfig { k_range: [0.5, 0.5], batch: 2, epochs: 1, ..Default::default() };
    let log = train_sft(&mut m, &cfg, &pairs, 0).unwrap();
    for row in log {
        assert!(row.ks.split(';').all(|k| k == "16"));
    }
    let bad = SftConfig { k_range: [0.8, 0.2], ..Default::default() };
    assert!(train_sft(&mut m, &bad, &pairs, 0).is_err());
}

#[test]
fn sft_touches_only_its_stage() {
    let mut m = model(4);
    let pairs = corpus(&m, 4);
    let before = [Stage::Pretrain, Stage::Sft, Stage::Rl].map(|s| m.stage_checksum(s));
    let cfg = SftConfig { batch: 2, epochs: 1, lr: 1e-2, ..Default::default() };
    train_sft(&mut m, &cfg, &pairs, 0).unwrap();
    assert_eq!(m.stage_checksum(Stage::Pretrain), before[0]);
    assert_ne!(m.stage_checksum(Stage::Sft), before[1]);
    assert_eq!(m.stage_checksum(Stage::Rl), before[2]);
}

#[test]
fn sft_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut m = model(5);
    wake_shaper(&mut m, &mut rng);
    let pair = corpus(&m, 1).remove(0);
    let head = |n: &str| n.starts_with("translator.") || n.starts_with("shaper.");
    let report = grad_check(&mut m, head, 1e-5, |m: &LatentMorph, g: &mut Graph| {
        sft_loss(m, g, &pair, 12)
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

fn learned_group(m: &LatentMorph, seed: u64, n: usize) -> Vec<Rollout> {
    let spec = gen_task(seed, Tier::Hard, &m.generator.cfg.task()).unwrap();
    let prompt = m.generator.embed_prompt(&spec).unwrap();
    (0..n)
        .map(|j| rollout(m, &spec, &prompt, Policy::Learned(Mode::Train), derive_seed(seed, j as u64), 1.0).unwrap())
        .collect()
}

#[test]
fn rollouts_log_every_checkpoint() {
    let m = model(6);
    let group = learned_group(&m, 0, 4);
    for r in &group {
        assert_eq!(r.log.len(), 3);
        assert_eq!(r.trajectory.invocations.len(), 3);
        assert!(r.log.iter().all(|e| e.prob == 0.5));
        assert_eq!(r.p_bar(), 0.5);
    }
    let again = learned_group(&m, 0, 4);
    for (a, b) in group.iter().zip(&again) {
        assert_eq!(a.trajectory.tokens, b.trajectory.tokens);
        assert_eq!(a.trajectory.invocations, b.trajectory.invocations);
    }
}

#[test]
fn zero_advantages_leave_the_policy_alone() {
    let mut m = model(7);
    let mut group = learned_group(&m, 1, 4);
    group.iter_mut().for_each(|r| r.trajectory.reward = 0.3);
    let before = m.stage_checksum(Stage::Rl);
    let cfg = RlConfig { entropy_coef: 0.0, ..Default::default() };
    let mut opt = crate::numerics::AdamW::new(cfg.lr, 0.9, 0.999, 0.0);
    grpo_step(&mut m, &mut opt, &[group], &cfg).unwrap();
    assert_eq!(m.stage_checksum(Stage::Rl), before);
}

#[test]
fn rewarded_reason_becomes_more_likely() {
    let mut m = model(8);
    let mut group = learned_group(&m, 2, 2);
    for r in group.iter_mut() {
        r.log.truncate(1);
        r.trajectory.invocations.truncate(1);
    }
    group[0].log[0].action = Action::Reason;
    let p_reason = |m: &LatentMorph| {
        let mut g = Graph::new();
        let terms = policy_terms(m, &mut g, &group[0]).unwrap();
        g.value(terms[0].0).data()[0].exp()
    };
    let before = p_reason(&m);
    let refs: Vec<&Rollout> = group.iter().collect();
    let mut g = Graph::with_trainable(Stage::Rl.filter());
    let loss = grpo_loss(&m, &mut g, &refs, &[1.0, 0.0], 0.0).unwrap();
    g.backward(loss).unwrap().accumulate_into(&mut m);
    let mut opt = crate::numerics::AdamW::new(1e-3, 0.9, 0.999, 0.0);
    opt.step(&mut m, &Stage::Rl.filter());
    let after = p_reason(&m);
    assert!(after > before, "{after} vs {before}");
}

#[test]
fn surrogate_gradients_match_finite_differences() {
    let mut m = model(9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    m.invoker.visit_mut(&mut |p| p.tensor.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5)));
    let group = learned_group(&m, 3, 3);
    let refs: Vec<&Rollout> = group.iter().collect();
    let adv = [0.7, -1.2, 0.5];
    let report = grad_check(&mut m, Stage::Rl.filter(), 1e-5, |m: &LatentMorph, g: &mut Graph| {
        grpo_loss(m, g, &refs, &adv, 0.01)
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn rl_touches_only_its_stage_and_zero_steps_is_identity() {
    let mut m = model(10);
    let before = [Stage::Pretrain, Stage::Sft, Stage::Rl].map(|s| m.stage_checksum(s));
    let tiers = [Tier::Hard];
    let none = RlConfig { steps: 0, ..Default::default() };
    assert!(train_rl(&mut m, &none, &tiers, 0, 0).unwrap().is_empty());
    assert_eq!(m.stage_checksum(Stage::Rl), before[2]);
    let cfg = RlConfig { steps: 2, group_size: 4, groups_per_step: 1, lr: 1e-2, ..Default::default() };
    let log = train_rl(&mut m, &cfg, &tiers, 0, 0).unwrap();
    assert_eq!(log.len(), 2);
    assert_eq!(m.stage_checksum(Stage::Pretrain), before[0]);
    assert_eq!(m.stage_checksum(Stage::Sft), before[1]);
    assert_ne!(m.stage_checksum(Stage::Rl), before[2]);
}

#[test]
fn mixed_groups_are_rejected() {
    let m = model(11);
    let mut group = learned_group(&m, 4, 2);
    group[1].spec = gen_task(99, Tier::Hard, &m.generator.cfg.task()).unwrap();
    assert!(group_stats(&group, &RlConfig::default()).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lmck");
    let m = model(12);
    m.save(&path).unwrap();
    let mut other = model(13);
    assert_ne!(other.checksum(), m.checksum());
    other.load(&path).unwrap();
    assert_eq!(other.checksum(), m.checksum());
}
