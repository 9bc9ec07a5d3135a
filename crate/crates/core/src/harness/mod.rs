//! Configuration, seeded experiment commands, metrics files and the
//! ablation matrix.

mod ablate;
mod commands;
mod config;
mod gradcheck;
mod pipeline;
mod report;

use std::path::Path;

pub use ablate::{ablation_arms, run_ablation, AblationRow, Arm, ArmGroup};
pub use commands::{cmd_ablate, cmd_eval, cmd_gradcheck, cmd_train_rl, cmd_train_sft, EvalReport};
pub use config::{AblateConfig, CheckpointPaths, EvalConfig, ExperimentConfig, TaskSeeds};
pub use gradcheck::{gradcheck_suite, toy_config, GradCheckRow, GRADCHECK_TOL};
pub use pipeline::{
    eval_seed, eval_task, evaluate, init_model, monitoring_overhead, run_pretrain, run_rl, run_sft, EvalOutcome,
    EvalRow, EvalTrajectory,
};
pub use report::{bar_chart_svg, write_csv, write_jsonl};

use crate::generator::GeneratorError;
use crate::numerics::NumericsError;
use crate::synthtask::TaskError;
use crate::training::TrainingError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("check failed: {0}")]
    Oracle(String),
    #[error(transparent)]
    Training(#[from] TrainingError),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit status: 1 configuration, 2 file system, 3 everything
    /// that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Training(TrainingError::Config(_)) => 1,
            HarnessError::Io { .. } => 2,
            _ => 3,
        }
    }
}

impl From<NumericsError> for HarnessError {
    fn from(e: NumericsError) -> Self {
        HarnessError::Training(e.into())
    }
}

impl From<GeneratorError> for HarnessError {
    fn from(e: GeneratorError) -> Self {
        HarnessError::Training(e.into())
    }
}

impl From<TaskError> for HarnessError {
    fn from(e: TaskError) -> Self {
        HarnessError::Training(e.into())
    }
}
