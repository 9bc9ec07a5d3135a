//! The synthetic compositional task: count-in-region constraints over a
//! token canvas, a brute-force checkable reward, and baseline invocation
//! schedules.
//!
//! The canvas of `seq_len` tokens is split into equal regions. Symbols
//! `0..regions` are per-region fillers; the rest are object symbols that
//! constraints ask for. A spec's text form is
//! `TIER:constraint(sym,count,lo..hi);constraint(...)`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TaskError {
    #[error("invalid task spec: {0}")]
    Invalid(String),
    #[error("cannot parse task spec: {0}")]
    Parse(String),
    #[error("token sequence has length {got}, canvas needs {want}")]
    Length { got: usize, want: usize },
    #[error("task configuration error: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub seq_len: usize,
    pub vocab_size: usize,
    pub regions: usize,
    pub max_count: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            seq_len: 64,
            vocab_size: 64,
            regions: 4,
            max_count: 4,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.regions == 0 || self.seq_len % self.regions != 0 {
            return Err(TaskError::Config(format!(
                "canvas of {} tokens does not split into {} regions",
                self.seq_len, self.regions
            )));
        }
        if self.max_count == 0 || self.max_count * 3 > self.region_size() {
            return Err(TaskError::Config(format!(
                "three constraints of up to {} symbols must fit a region of {}",
                self.max_count,
                self.region_size()
            )));
        }
        if self.vocab_size < self.regions + 3 {
            return Err(TaskError::Config(format!(
                "vocabulary of {} leaves fewer than 3 object symbols",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn region_size(&self) -> usize {
        self.seq_len / self.regions.max(1)
    }

    pub fn region_bounds(&self, region: usize) -> (usize, usize) {
        let s = self.region_size();
        (region * s, region * s + s - 1)
    }

    fn region_index(&self, lo: usize, hi: usize) -> Option<usize> {
        let s = self.region_size();
        (lo % s == 0 && hi + 1 == lo + s && hi < self.seq_len).then_some(lo / s)
    }

    /// Number of distinct prompt symbols: padding, one per output symbol,
    /// one per (region, count) pair.
    pub fn prompt_vocab_size(&self) -> usize {
        1 + self.vocab_size + self.regions * self.max_count
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Tier {
    Easy,
    Medium,
    Hard,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Easy, Tier::Medium, Tier::Hard];

    pub fn level(self) -> usize {
        match self {
            Tier::Easy => 1,
            Tier::Medium => 2,
            Tier::Hard => 3,
        }
    }

    pub fn from_level(level: usize) -> Option<Self> {
        match level {
            1 => Some(Tier::Easy),
            2 => Some(Tier::Medium),
            3 => Some(Tier::Hard),
            _ => None,
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Easy => "EASY",
            Tier::Medium => "MEDIUM",
            Tier::Hard => "HARD",
        })
    }
}

impl FromStr for Tier {
    type Err = TaskError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "EASY" => Ok(Tier::Easy),
            "MEDIUM" => Ok(Tier::Medium),
            "HARD" => Ok(Tier::Hard),
            other => Err(TaskError::Parse(format!("unknown tier {other:?}"))),
        }
    }
}

/// "At `count` copies of `symbol` inside canvas positions `region_lo..=region_hi`."
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Constraint {
    pub symbol: usize,
    pub count: usize,
    pub region_lo: usize,
    pub region_hi: usize,
}

impl Constraint {
    fn region_len(&self) -> usize {
        self.region_hi + 1 - self.region_lo
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TaskSpec {
    pub tier: Tier,
    pub constraints: Vec<Constraint>,
}

impl TaskSpec {
    /// A spec with no constraints; embeds to all padding.
    pub fn empty() -> Self {
        Self {
            tier: Tier::Easy,
            constraints: Vec::new(),
        }
    }

    /// Regions disjoint or identical, counts positive and within region,
    /// and the total demand of a shared region fits inside it.
    pub fn validate(&self, seq_len: usize) -> Result<(), TaskError> {
        for c in &self.constraints {
            if c.region_lo > c.region_hi || c.region_hi >= seq_len {
                return Err(TaskError::Invalid(format!("region {}..{} outside canvas", c.region_lo, c.region_hi)));
            }
            if c.count == 0 || c.count > c.region_len() {
                return Err(TaskError::Invalid(format!("count {} does not fit region", c.count)));
            }
        }
        for (i, a) in self.constraints.iter().enumerate() {
            for b in &self.constraints[i + 1..] {
                let same = a.region_lo == b.region_lo && a.region_hi == b.region_hi;
                let disjoint = a.region_hi < b.region_lo || b.region_hi < a.region_lo;
                if !same && !disjoint {
                    return Err(TaskError::Invalid("regions overlap without being identical".into()));
                }
                if same && a.symbol == b.symbol {
                    return Err(TaskError::Invalid("duplicate symbol within one region".into()));
                }
            }
            let demand: usize = self
                .constraints
                .iter()
                .filter(|b| b.region_lo == a.region_lo && b.region_hi == a.region_hi)
                .map(|b| b.count)
                .sum();
            if demand > a.region_len() {
                return Err(TaskError::Invalid("constraints over-fill a region".into()));
            }
        }
        Ok(())
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.tier)?;
        for (i, c) in self.constraints.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "constraint({},{},{}..{})", c.symbol, c.count, c.region_lo, c.region_hi)?;
        }
        Ok(())
    }
}

impl FromStr for TaskSpec {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (tier, rest) = s
            .split_once(':')
            .ok_or_else(|| TaskError::Parse(format!("missing tier in {s:?}")))?;
        let tier: Tier = tier.parse()?;
        let mut constraints = Vec::new();
        for part in rest.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let body = part
                .strip_prefix("constraint(")
                .and_then(|p| p.strip_suffix(')'))
                .ok_or_else(|| TaskError::Parse(format!("bad constraint {part:?}")))?;
            let fields: Vec<&str> = body.split(',').map(str::trim).collect();
            let [sym, count, region] = fields[..] else {
                return Err(TaskError::Parse(format!("constraint needs 3 fields: {part:?}")));
            };
            let (lo, hi) = region
                .split_once("..")
                .ok_or_else(|| TaskError::Parse(format!("bad region {region:?}")))?;
            let num = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|e| TaskError::Parse(format!("{v:?}: {e}")))
            };
            constraints.push(Constraint {
                symbol: num(sym)?,
                count: num(count)?,
                region_lo: num(lo)?,
                region_hi: num(hi)?,
            });
        }
        if constraints.len() != tier.level() {
            return Err(TaskError::Parse(format!(
                "{} spec needs {} constraints, found {}",
                tier,
                tier.level(),
                constraints.len()
            )));
        }
        Ok(Self { tier, constraints })
    }
}

/// Deterministic task draw: `tier.level()` constraints over distinct object
/// symbols, ordered by region then symbol.
pub fn gen_task(seed: u64, tier: Tier, cfg: &TaskConfig) -> Result<TaskSpec, TaskError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tier.level() as u64);
    let objects: Vec<usize> = (cfg.regions..cfg.vocab_size).collect();
    let symbols: Vec<usize> = objects.choose_multiple(&mut rng, tier.level()).copied().collect();
    let mut used = vec![0usize; cfg.regions];
    let mut constraints = Vec::with_capacity(symbols.len());
    for symbol in symbols {
        let region = rng.gen_range(0..cfg.regions);
        let room = cfg.region_size() - used[region];
        let count = rng.gen_range(1..=cfg.max_count).min(room);
        used[region] += count;
        let (lo, hi) = cfg.region_bounds(region);
        constraints.push(Constraint {
            symbol,
            count,
            region_lo: lo,
            region_hi: hi,
        });
    }
    constraints.sort_by_key(|c| (c.region_lo, c.symbol));
    Ok(TaskSpec { tier, constraints })
}

/// Canonical satisfying canvas: each region starts with its constraints'
/// symbols in spec order and is padded with that region's filler.
pub fn witness(spec: &TaskSpec, cfg: &TaskConfig) -> Vec<usize> {
    let s = cfg.region_size();
    let mut tokens: Vec<usize> = (0..cfg.seq_len).map(|i| (i / s).min(cfg.regions - 1)).collect();
    let mut cursor: Vec<usize> = (0..cfg.regions).map(|r| r * s).collect();
    for c in &spec.constraints {
        let r = c.region_lo / s;
        for _ in 0..c.count {
            tokens[cursor[r]] = c.symbol;
            cursor[r] += 1;
        }
    }
    tokens
}

/// Prompt symbols for `spec`, padded with 0 to `prompt_len`.
pub fn encode_prompt(spec: &TaskSpec, cfg: &TaskConfig, prompt_len: usize) -> Result<Vec<usize>, TaskError> {
    if 2 * spec.constraints.len() > prompt_len {
        return Err(TaskError::Config(format!(
            "spec needs {} prompt slots, only {} available",
            2 * spec.constraints.len(),
            prompt_len
        )));
    }
    let mut ids = vec![0; prompt_len];
    for (i, c) in spec.constraints.iter().enumerate() {
        if c.symbol >= cfg.vocab_size || c.count == 0 || c.count > cfg.max_count {
            return Err(TaskError::Config(format!("constraint {c:?} outside the prompt vocabulary")));
        }
        let region = cfg
            .region_index(c.region_lo, c.region_hi)
            .ok_or_else(|| TaskError::Config(format!("region {}..{} is not on the grid", c.region_lo, c.region_hi)))?;
        ids[2 * i] = 1 + c.symbol;
        ids[2 * i + 1] = 1 + cfg.vocab_size + region * cfg.max_count + (c.count - 1);
    }
    Ok(ids)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RewardReport {
    pub reward: f64,
    pub per_constraint: Vec<f64>,
}

/// Symmetric shortfall/overflow score of one constraint.
pub fn constraint_score(count: usize, target: usize) -> f64 {
    let (n, t) = (count as f64, target as f64);
    (n / t).min(t / n.max(1.0)).min(1.0)
}

pub fn reward(tokens: &[usize], spec: &TaskSpec, seq_len: usize) -> Result<RewardReport, TaskError> {
    if tokens.len() != seq_len {
        return Err(TaskError::Length {
            got: tokens.len(),
            want: seq_len,
        });
    }
    let per_constraint: Vec<f64> = spec
        .constraints
        .iter()
        .map(|c| {
            let n = tokens[c.region_lo..=c.region_hi]
                .iter()
                .filter(|&&t| t == c.symbol)
                .count();
            constraint_score(n, c.count)
        })
        .collect();
    let reward = if per_constraint.is_empty() {
        1.0
    } else {
        per_constraint.iter().sum::<f64>() / per_constraint.len() as f64
    };
    Ok(RewardReport {
        reward,
        per_constraint,
    })
}

/// A scalar judge of a generated canvas.
pub trait RewardModel: Send + Sync {
    fn score(&self, tokens: &[usize], spec: &TaskSpec) -> Result<f64, TaskError>;
}

/// The count-in-region oracle.
#[derive(Clone, Debug)]
pub struct CountReward {
    pub seq_len: usize,
}

impl RewardModel for CountReward {
    fn score(&self, tokens: &[usize], spec: &TaskSpec) -> Result<f64, TaskError> {
        Ok(reward(tokens, spec, self.seq_len)?.reward)
    }
}

/// Weighted sum of several reward models.
pub struct WeightedReward {
    pub parts: Vec<(f64, Box<dyn RewardModel>)>,
}

impl WeightedReward {
    pub fn single(model: impl RewardModel + 'static) -> Self {
        Self {
            parts: vec![(1.0, Box::new(model))],
        }
    }
}

impl RewardModel for WeightedReward {
    fn score(&self, tokens: &[usize], spec: &TaskSpec) -> Result<f64, TaskError> {
        self.parts
            .iter()
            .map(|(w, m)| m.score(tokens, spec).map(|s| w * s))
            .sum()
    }
}

/// Who decides when to reason during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SchedulerKind {
    Learned,
    Random(f64),
    Fixed(usize),
    None,
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchedulerKind::Learned => f.write_str("learned"),
            SchedulerKind::Random(p) => write!(f, "random:{p}"),
            SchedulerKind::Fixed(n) => write!(f, "fixed:{n}"),
            SchedulerKind::None => f.write_str("none"),
        }
    }
}

impl From<SchedulerKind> for String {
    fn from(k: SchedulerKind) -> String {
        k.to_string()
    }
}

impl TryFrom<String> for SchedulerKind {
    type Error = TaskError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl FromStr for SchedulerKind {
    type Err = TaskError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        let (head, arg) = match lower.split_once(':') {
            Some((h, a)) => (h.to_string(), Some(a.to_string())),
            None => (lower.clone(), None),
        };
        let bad = || TaskError::Parse(format!("unknown scheduler {s:?}"));
        match (head.as_str(), arg) {
            ("learned", None) => Ok(SchedulerKind::Learned),
            ("none", None) => Ok(SchedulerKind::None),
            ("random", Some(p)) => {
                let p: f64 = p.parse().map_err(|_| bad())?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(bad());
                }
                Ok(SchedulerKind::Random(p))
            }
            ("fixed", Some(n)) => match n.parse() {
                Ok(n @ 1..) => Ok(SchedulerKind::Fixed(n)),
                _ => Err(bad()),
            },
            _ => Err(bad()),
        }
    }
}

/// Steps at which the monitor runs: positive multiples of `w` strictly
/// inside the canvas.
pub fn checkpoints(seq_len: usize, w: usize) -> Vec<usize> {
    if w == 0 {
        return Vec::new();
    }
    (1..).map(|i| i * w).take_while(|&s| s < seq_len).collect()
}

fn nearest_checkpoint(target: usize, cps: &[usize]) -> Option<usize> {
    cps.iter()
        .copied()
        .min_by_key(|&c| (c.abs_diff(target), c))
}

/// Invocation steps of a non-learned scheduler. `Random(p)` draws one
/// Bernoulli per checkpoint; `Fixed(n)` picks the checkpoints nearest to
/// `floor(i·|X|/(n+1))` for `i = 1..=n`.
pub fn baseline_scheduler<R: Rng>(kind: SchedulerKind, seq_len: usize, w: usize, rng: &mut R) -> BTreeSet<usize> {
    let cps = checkpoints(seq_len, w);
    match kind {
        SchedulerKind::Random(p) => cps.into_iter().filter(|_| rng.gen::<f64>() < p).collect(),
        SchedulerKind::Fixed(n) => (1..=n)
            .filter_map(|i| nearest_checkpoint(i * seq_len / (n + 1), &cps))
            .collect(),
        SchedulerKind::None | SchedulerKind::Learned => BTreeSet::new(),
    }
}
