use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use latentmorph::harness::{cmd_ablate, cmd_eval, cmd_gradcheck, cmd_train_rl, cmd_train_sft, ExperimentConfig, HarnessError};
use latentmorph::synthtask::SchedulerKind;

#[derive(Parser)]
#[command(name = "latentmorph", version, about = "Train and evaluate adaptive latent-reasoning control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Scheduler for `eval`: learned, none, fixed:N or random:P.
    #[arg(long, global = true)]
    scheduler: Option<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    TrainSft,
    TrainRl,
    Eval,
    Ablate,
    Gradcheck,
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    let scheduler = cli
        .scheduler
        .as_deref()
        .map(|s| s.parse::<SchedulerKind>().map_err(|e| HarnessError::Config(e.to_string())))
        .transpose()?;
    cfg.validate()?;

    let start = Instant::now();
    match cli.command {
        Command::TrainSft => {
            let log = cmd_train_sft(&cfg)?;
            if let (Some(first), Some(last)) = (log.first(), log.last()) {
                println!("sft: {} steps, loss {:.5} -> {:.5}", log.len(), first.loss, last.loss);
            }
        }
        Command::TrainRl => {
            let log = cmd_train_rl(&cfg)?;
            if let Some(last) = log.last() {
                println!(
                    "rl: {} steps, final reward {:.4}, p_bar {:.4}, invocations {:.3}",
                    log.len(),
                    last.mean_reward,
                    last.mean_p_bar,
                    last.invocations_per_traj
                );
            }
        }
        Command::Eval => {
            let kinds = scheduler.map(|k| vec![k]);
            let report = cmd_eval(&cfg, kinds.as_deref())?;
            print!("{}", report.table());
        }
        Command::Ablate => {
            for row in cmd_ablate(&cfg)? {
                println!(
                    "{:>3} {:<10} {:<28} reward {:.4} invocations {:.3}",
                    row.arm,
                    format!("{:?}", row.group).to_lowercase(),
                    row.setting,
                    row.mean_reward,
                    row.mean_invocations
                );
            }
        }
        Command::Gradcheck => {
            for r in cmd_gradcheck(&cfg)? {
                println!("{:<16} {:.3e} over {} entries", r.component, r.max_rel_error, r.entries);
            }
        }
    }
    println!("wall-clock {:.2}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
