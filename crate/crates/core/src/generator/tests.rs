use super::*;
use crate::control::{inject, ControlTokens, Shaper};
use crate::numerics::{grad_check, Graph};
use crate::synthtask::{gen_task, Constraint, Tier};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) fn small_cfg() -> GeneratorConfig {
    GeneratorConfig {
        vocab_size: 16,
        d_model: 16,
        layers: 2,
        heads: 2,
        seq_len: 48,
        prompt_len: 8,
        ..GeneratorConfig::default()
    }
}

fn model(seed: u64) -> Generator {
    Generator::new(small_cfg(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn prompt(gen: &Generator, seed: u64) -> PromptEmbedding {
    gen.embed_prompt(&gen_task(seed, Tier::Hard, &gen.cfg.task()).unwrap()).unwrap()
}

fn random_tokens(gen: &Generator, rng: &mut ChaCha8Rng, j: usize, k: usize) -> ControlTokens {
    use rand::Rng;
    let d = gen.d();
    let rand_t = |rng: &mut ChaCha8Rng| Tensor::matrix(j, d, (0..j * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let layers = gen.cfg.layers;
    ControlTokens {
        keys: (0..layers).map(|_| rand_t(rng)).collect(),
        values: (0..layers).map(|_| rand_t(rng)).collect(),
        gates: vec![rng.gen_range(0.2..1.0); layers],
        attach_step: k,
        cfg_replicated: false,
    }
}

/// Full tape recompute of the logits for `inputs` with plain control tokens.
fn oracle_logits(gen: &Generator, p: &PromptEmbedding, inputs: &[usize], controls: &[ControlTokens]) -> Tensor {
    let mut g = Graph::new();
    let rows = g.constant(p.tokens.clone());
    let tape: Vec<_> = controls.iter().map(|c| c.to_tape(&mut g)).collect();
    let out = gen.forward_tape(&mut g, rows, inputs, &tape).unwrap();
    g.value(out.logits).clone()
}

#[test]
fn prompt_embedding_cases() {
    let gen = model(0);
    let spec = gen_task(4, Tier::Medium, &gen.cfg.task()).unwrap();
    let a = gen.embed_prompt(&spec).unwrap();
    assert_eq!(a, gen.embed_prompt(&spec).unwrap());
    let pooled = a.tokens.mean_rows();
    assert!(pooled.data().iter().zip(&a.pooled).all(|(x, y)| (x - y).abs() < 1e-12));

    let empty = gen.embed_prompt(&crate::synthtask::TaskSpec::empty()).unwrap();
    let pad = gen.prompt_embed.tensor.row_slice(0);
    assert!(empty.pooled.iter().zip(pad).all(|(x, y)| (x - y).abs() < 1e-12));

    let mut other = spec.clone();
    let used: Vec<usize> = spec.constraints.iter().map(|c| c.symbol).collect();
    other.constraints[1].symbol = (gen.cfg.regions..gen.cfg.vocab_size).find(|s| !used.contains(s)).unwrap();
    let b = gen.embed_prompt(&other).unwrap();
    let differing: Vec<usize> = (0..8).filter(|&r| a.tokens.row_slice(r) != b.tokens.row_slice(r)).collect();
    assert_eq!(differing, vec![2]);

    let mut long = gen_task(0, Tier::Hard, &gen.cfg.task()).unwrap();
    long.constraints.push(Constraint { symbol: 9, count: 1, region_lo: 36, region_hi: 47 });
    long.constraints.push(Constraint { symbol: 10, count: 1, region_lo: 36, region_hi: 47 });
    assert!(matches!(gen.embed_prompt(&long), Err(GeneratorError::Task(_))));
}

#[test]
fn entropy_cases() {
    assert!((entropy(&[0.3; 16]).unwrap() - 1.0).abs() < 1e-12);
    let mut peaked = vec![0.0; 16];
    peaked[3] = 1e6;
    assert!(entropy(&peaked).unwrap() < 1e-12);
    let h = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln()) / 2f64.ln();
    assert!((entropy(&[3f64.ln(), 0.0]).unwrap() - h).abs() < 1e-12);
    assert!((h - 0.8113).abs() < 1e-4);
    assert!(entropy(&[0.0, f64::INFINITY]).is_err());
}

#[test]
fn greedy_sampling_is_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(sample_token(&[0.1, 2.0, -1.0, 2.0], 0.0, &mut rng).unwrap(), 1);
    let logits = [0.5, 0.1, 0.3];
    let a = sample_token(&logits, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = sample_token(&logits, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn cached_decode_matches_full_recompute() {
    let gen = model(1);
    let p = prompt(&gen, 3);
    let traj = generate(&gen, &p, 0, &mut NoopController, &mut ChaCha8Rng::seed_from_u64(2), 1.0).unwrap();
    let inputs = gen.teacher_inputs(&traj.tokens);
    let full = oracle_logits(&gen, &p, &inputs, &[]);
    for (t, row) in traj.trace.logits.iter().enumerate() {
        let diff = row.iter().zip(full.row_slice(t)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-9, "step {t}: {diff}");
    }
}

#[test]
fn injection_matches_concatenation_and_keeps_positions() {
    let gen = model(2);
    let p = prompt(&gen, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let targets: Vec<usize> = (0..48).map(|i| (i * 7 + 3) % 16).collect();
    let inputs = gen.teacher_inputs(&targets);
    let groups = [random_tokens(&gen, &mut rng, 3, 12), random_tokens(&gen, &mut rng, 3, 30)];
    let mut groups = groups.to_vec();
    groups[1].gates = groups[0].gates.clone();

    let mut plain = Decoder::new(&gen, &p).unwrap();
    let mut dec = Decoder::new(&gen, &p).unwrap();
    let mut logits = Vec::new();
    for (t, &input) in inputs.iter().enumerate() {
        for grp in groups.iter().filter(|g| g.attach_step == t) {
            inject(&mut dec, grp, t).unwrap();
        }
        logits.push(dec.forward_step(input, t).unwrap().1);
        plain.forward_step(input, t).unwrap();
    }
    let full = oracle_logits(&gen, &p, &inputs, &groups);
    for (t, row) in logits.iter().enumerate() {
        let diff = row.iter().zip(full.row_slice(t)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-9, "step {t}: {diff}");
    }
    assert_eq!(dec.cache().token_positions(), plain.cache().token_positions());
    assert_eq!(dec.cache().control_groups(), vec![(8 + 12, 3), (8 + 30, 3)]);
}

#[test]
fn injection_requires_matching_step() {
    let gen = model(0);
    let p = prompt(&gen, 0);
    let mut dec = Decoder::new(&gen, &p).unwrap();
    dec.forward_step(gen.cfg.bos(), 0).unwrap();
    let tokens = random_tokens(&gen, &mut ChaCha8Rng::seed_from_u64(0), 2, 3);
    assert!(matches!(inject(&mut dec, &tokens, 1), Err(GeneratorError::Consistency(_))));
    assert!(matches!(inject(&mut dec, &tokens.clone().with_step(1), 1), Ok(())));
}

#[test]
fn decode_past_the_canvas_is_an_error() {
    let gen = model(0);
    let p = prompt(&gen, 0);
    let mut dec = Decoder::new(&gen, &p).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut input = gen.cfg.bos();
    for t in 0..gen.cfg.seq_len {
        input = dec.decode_step(input, t, &mut rng, 0.0).unwrap().token;
    }
    assert!(matches!(
        dec.decode_step(input, gen.cfg.seq_len, &mut rng, 0.0),
        Err(GeneratorError::Exhausted(48))
    ));
}

struct Counting(Vec<usize>);

impl Controller for Counting {
    fn decide(&mut self, ctx: &CheckpointCtx<'_>) -> Result<Decision, ControllerError> {
        assert_eq!(ctx.tokens.len(), ctx.step);
        assert_eq!(ctx.trace.len(), ctx.step);
        self.0.push(ctx.step);
        Ok(Decision::cont(0.5))
    }
}

#[test]
fn controller_fires_at_interior_multiples() {
    let mut cfg = small_cfg();
    cfg.seq_len = 64;
    let gen = Generator::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let p = gen.null_prompt();
    let mut c = Counting(Vec::new());
    let traj = generate(&gen, &p, 16, &mut c, &mut ChaCha8Rng::seed_from_u64(0), 1.0).unwrap();
    assert_eq!(c.0, vec![16, 32, 48]);
    assert_eq!(traj.tokens.len(), 64);
    assert!((traj.p_bar() - 0.5).abs() < 1e-15);
    let plain = generate(&gen, &p, 16, &mut NoopController, &mut ChaCha8Rng::seed_from_u64(0), 1.0).unwrap();
    assert_eq!(plain.tokens, traj.tokens);
}

struct FreshShaper {
    shaper: Shaper,
    at: usize,
}

impl Controller for FreshShaper {
    fn decide(&mut self, ctx: &CheckpointCtx<'_>) -> Result<Decision, ControllerError> {
        if ctx.step != self.at {
            return Ok(Decision::cont(0.0));
        }
        let tokens = self.shaper.shape(&ctx.prompt.pooled, ctx.step, false)?;
        Ok(Decision {
            action: Action::Reason,
            prob: 1.0,
            intervention: Some(Intervention::Inject(tokens)),
        })
    }
}

#[test]
fn fresh_shaper_injection_is_a_no_op() {
    let gen = model(5);
    for seed in 0..5 {
        let p = prompt(&gen, seed);
        let base = generate(&gen, &p, 16, &mut NoopController, &mut ChaCha8Rng::seed_from_u64(seed), 0.0).unwrap();
        let mut c = FreshShaper {
            shaper: Shaper::new(16, 4, 2, &mut ChaCha8Rng::seed_from_u64(seed)),
            at: 16,
        };
        let steered = generate(&gen, &p, 16, &mut c, &mut ChaCha8Rng::seed_from_u64(seed), 0.0).unwrap();
        assert_eq!(base.tokens, steered.tokens);
        assert_eq!(base.trace, steered.trace);
        assert_eq!(steered.invocation_steps(), vec![16]);
    }
}

struct Failing;

impl Controller for Failing {
    fn decide(&mut self, _ctx: &CheckpointCtx<'_>) -> Result<Decision, ControllerError> {
        Err("policy exploded".into())
    }
}

#[test]
fn controller_error_keeps_partial_trajectory() {
    let gen = model(0);
    let p = gen.null_prompt();
    match generate(&gen, &p, 16, &mut Failing, &mut ChaCha8Rng::seed_from_u64(0), 1.0) {
        Err(GeneratorError::Controller { step, partial, .. }) => {
            assert_eq!(step, 16);
            assert_eq!(partial.tokens.len(), 16);
        }
        other => panic!("expected controller error, got {other:?}"),
    }
}

#[test]
fn cfg_doubles_streams_and_replicates_controls() {
    let mut cfg = small_cfg();
    cfg.cfg_enabled = true;
    let gen = Generator::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let p = prompt(&gen, 2);
    let mut dec = Decoder::new(&gen, &p).unwrap();
    assert_eq!(dec.streams().len(), 2);
    dec.forward_step(gen.cfg.bos(), 0).unwrap();
    let tokens = random_tokens(&gen, &mut ChaCha8Rng::seed_from_u64(1), 4, 1);
    inject(&mut dec, &tokens, 1).unwrap();
    let (cond, uncond) = (&dec.streams()[0], &dec.streams()[1]);
    assert_eq!(cond.control_groups(), uncond.control_groups());
    for l in 0..gen.cfg.layers {
        let n = cond.len();
        assert_eq!(cond.values(l).slice_rows(n - 4, 4), uncond.values(l).slice_rows(n - 4, 4));
        assert_eq!(cond.keys(l).slice_rows(n - 4, 4), uncond.keys(l).slice_rows(n - 4, 4));
    }
}

#[test]
fn replace_prompt_matches_fresh_prefill() {
    let gen = model(3);
    let p = prompt(&gen, 0);
    let inputs = [gen.cfg.bos(), 4, 9, 2];
    let mut dec = Decoder::new(&gen, &p).unwrap();
    for (t, &i) in inputs.iter().enumerate() {
        dec.forward_step(i, t).unwrap();
    }
    let c: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
    let rows = Tensor::matrix(8, 16, c.repeat(8)).unwrap();
    dec.replace_prompt(&rows).unwrap();
    let (_, after) = dec.forward_step(5, 4).unwrap();

    let replaced = PromptEmbedding::from_rows(p.ids.clone(), rows);
    let mut fresh = Decoder::new(&gen, &replaced).unwrap();
    for (t, &i) in inputs.iter().chain([5].iter()).enumerate() {
        let (_, l) = fresh.forward_step(i, t).unwrap();
        if t == 4 {
            assert_eq!(l, after);
        }
    }
    let mut orig = Decoder::new(&gen, &p).unwrap();
    let mut last = Vec::new();
    for (t, &i) in inputs.iter().chain([5].iter()).enumerate() {
        last = orig.forward_step(i, t).unwrap().1;
    }
    assert_ne!(last, after);
}

#[test]
fn generator_gradients_match_finite_differences() {
    let cfg = GeneratorConfig {
        vocab_size: 8,
        d_model: 8,
        layers: 1,
        heads: 2,
        seq_len: 6,
        prompt_len: 2,
        regions: 1,
        max_count: 1,
        ..GeneratorConfig::default()
    };
    let mut gen = Generator::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let targets = [1usize, 4, 2, 7, 0, 3];
    let report = grad_check(&mut gen, |_| true, 1e-5, move |m, g| {
        let rows = m.prompt_rows(g, &[1, 3]);
        let out = m.forward_tape(g, rows, &m.teacher_inputs(&targets), &[])?;
        let t: Vec<Option<usize>> = targets.iter().map(|&t| Some(t)).collect();
        Ok::<_, GeneratorError>(g.nll(out.logits, &t))
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}
