use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use super::pipeline::{evaluate, init_model, run_pretrain, run_rl, run_sft, EvalOutcome};
use super::report::{bar_chart_svg, write_csv, write_jsonl};
use super::{gradcheck_suite, run_ablation, AblationRow, ExperimentConfig, GradCheckRow, HarnessError};
use crate::numerics::checkpoint;
use crate::synthtask::SchedulerKind;
use crate::training::{LatentMorph, RlLogRow, SftLogRow};

fn prepare_out(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| HarnessError::io(&cfg.out, e))?;
    cfg.save(&cfg.out.join("config.toml"))
}

fn save_model(model: &LatentMorph, path: &Path) -> Result<(), HarnessError> {
    let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    checkpoint::write_checkpoint(model, BufWriter::new(file))?;
    Ok(())
}

fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<LatentMorph, HarnessError> {
    if !path.is_file() {
        let e = std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found");
        return Err(HarnessError::io(path, e));
    }
    let mut model = init_model(cfg)?;
    model.load(path)?;
    Ok(model)
}

/// Pretrains the generator, then trains the control path; writes
/// `pretrain.csv`, `sft.csv` and the SFT checkpoint.
pub fn cmd_train_sft(cfg: &ExperimentConfig) -> Result<Vec<SftLogRow>, HarnessError> {
    prepare_out(cfg)?;
    let mut model = init_model(cfg)?;
    let pre = run_pretrain(cfg, &mut model)?;
    write_csv(&cfg.out.join("pretrain.csv"), &pre)?;
    let log = run_sft(cfg, &mut model)?;
    write_csv(&cfg.out.join("sft.csv"), &log)?;
    save_model(&model, &cfg.sft_checkpoint())?;
    Ok(log)
}

/// GRPO from the SFT checkpoint; writes `rl.csv` and the RL checkpoint.
pub fn cmd_train_rl(cfg: &ExperimentConfig) -> Result<Vec<RlLogRow>, HarnessError> {
    let mut model = load_model(cfg, &cfg.sft_checkpoint())?;
    prepare_out(cfg)?;
    let log = run_rl(cfg, &mut model)?;
    write_csv(&cfg.out.join("rl.csv"), &log)?;
    save_model(&model, &cfg.rl_checkpoint())?;
    Ok(log)
}

#[derive(Debug)]
pub struct EvalReport {
    pub outcomes: Vec<EvalOutcome>,
}

impl EvalReport {
    pub fn get(&self, kind: SchedulerKind, tier: crate::synthtask::Tier) -> Option<&EvalOutcome> {
        self.outcomes.iter().find(|o| o.row.scheduler == kind && o.row.tier == tier)
    }

    /// Plain-text summary including wall-clock, which never goes to files.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<12} {:<7} {:>6} {:>12} {:>12} {:>10} {:>14}\n",
            "scheduler", "tier", "n", "reward", "invocations", "p_bar", "ms/trajectory"
        );
        for o in &self.outcomes {
            let r = &o.row;
            s += &format!(
                "{:<12} {:<7} {:>6} {:>12.4} {:>12.3} {:>10.4} {:>14.3}\n",
                r.scheduler.to_string(),
                r.tier.to_string(),
                r.trajectories,
                r.mean_reward,
                r.mean_invocations,
                r.mean_p_bar,
                1e3 * o.secs_per_trajectory()
            );
        }
        s
    }
}

/// Evaluates each scheduler on every configured tier; `schedulers`
/// overrides the configured list.
pub fn cmd_eval(cfg: &ExperimentConfig, schedulers: Option<&[SchedulerKind]>) -> Result<EvalReport, HarnessError> {
    let model = load_model(cfg, &cfg.eval_checkpoint())?;
    prepare_out(cfg)?;
    let kinds = schedulers.unwrap_or(&cfg.eval.schedulers);
    if kinds.is_empty() {
        return Err(HarnessError::Config("no schedulers to evaluate".into()));
    }
    let mut outcomes = Vec::new();
    for &kind in kinds {
        for &tier in &cfg.eval.tiers {
            outcomes.push(evaluate(cfg, &model, kind, tier, cfg.eval.tasks)?);
        }
    }
    let rows: Vec<_> = outcomes.iter().map(|o| o.row.clone()).collect();
    write_csv(&cfg.out.join("eval.csv"), &rows)?;
    if cfg.eval.trajectories {
        let all: Vec<_> = outcomes.iter().flat_map(|o| o.trajectories.iter()).collect();
        write_jsonl(&cfg.out.join("eval_trajectories.jsonl"), &all)?;
    }
    if cfg.eval.plot {
        let tiers: Vec<String> = cfg.eval.tiers.iter().map(|t| t.to_string()).collect();
        let series = |f: fn(&EvalOutcome) -> f64| -> Vec<(String, Vec<f64>)> {
            kinds
                .iter()
                .map(|&k| {
                    let v = outcomes.iter().filter(|o| o.row.scheduler == k).map(f).collect();
                    (k.to_string(), v)
                })
                .collect()
        };
        for (name, title, f) in [
            ("eval_reward.svg", "mean reward", (|o: &EvalOutcome| o.row.mean_reward) as fn(&EvalOutcome) -> f64),
            ("eval_invocations.svg", "mean invocations", |o: &EvalOutcome| o.row.mean_invocations),
        ] {
            let path = cfg.out.join(name);
            std::fs::write(&path, bar_chart_svg(title, &tiers, &series(f))).map_err(|e| HarnessError::io(&path, e))?;
        }
    }
    Ok(EvalReport { outcomes })
}

pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>, HarnessError> {
    prepare_out(cfg)?;
    let rows = run_ablation(cfg)?;
    write_csv(&cfg.out.join("ablation.csv"), &rows)?;
    Ok(rows)
}

/// Runs the gradient-check suite; fails after writing the report if any
/// component exceeds the tolerance.
pub fn cmd_gradcheck(cfg: &ExperimentConfig) -> Result<Vec<GradCheckRow>, HarnessError> {
    prepare_out(cfg)?;
    let rows = gradcheck_suite(cfg.seed)?;
    write_csv(&cfg.out.join("gradcheck.csv"), &rows)?;
    if let Some(bad) = rows.iter().find(|r| !r.passed) {
        return Err(HarnessError::Oracle(format!(
            "{} gradient error {:.3e} at {}",
            bad.component, bad.max_rel_error, bad.worst_param
        )));
    }
    Ok(rows)
}
