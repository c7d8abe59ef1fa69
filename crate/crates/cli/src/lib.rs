//! Library side of the `relhoi` command: configuration, dataset plumbing
//! and one function per subcommand, so that tests can drive everything
//! without spawning processes.

pub mod commands;
pub mod config;

pub use commands::dump_attn::{cmd_dump_attn, dump_attn, DumpSummary};
pub use commands::eval::{cmd_eval, evaluate_store};
pub use commands::gradcheck::{cmd_gradcheck, gradcheck_model, param_group, GradcheckReport, GroupResult};
pub use commands::synth::cmd_synth;
pub use commands::train::{cmd_train, train_on, StepLog, TrainRun};
pub use config::{Profile, RunConfig};

use std::path::Path;

use relhoi::matchloss::LossTerms;
use relhoi::model::ModelConfig;
use relhoi::synth::{load_dataset, Scene};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {terms:?}")]
    NonFinite { step: usize, terms: LossTerms },
    /// Predictions degenerated (collapsed boxes, overflow) mid-training.
    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error(transparent)]
    Core(#[from] relhoi::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<relhoi::TensorError> for CliError {
    fn from(e: relhoi::TensorError) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// 2 for numeric failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::NonFinite { .. } | CliError::Diverged { .. } | CliError::GradCheck(_) => 2,
            CliError::Core(relhoi::Error::Tensor(relhoi::TensorError::NonFinite(_))) => 2,
            _ => 1,
        }
    }
}

/// Loads a dataset and checks it fits `model`: canvas size and class ids.
pub fn load_scenes(path: &Path, model: &ModelConfig) -> Result<Vec<Scene>, CliError> {
    let scenes = load_dataset(path)?;
    let [h, w, _] = model.image;
    for (k, sc) in scenes.iter().enumerate() {
        if sc.spec.canvas != [h, w] {
            return Err(CliError::Config(format!(
                "{}: scene {k} has canvas {:?}, model expects {:?}",
                path.display(),
                sc.spec.canvas,
                [h, w]
            )));
        }
        for g in sc.spec.instances() {
            g.validate(model.num_obj, model.num_int)
                .map_err(|e| CliError::Config(format!("{}: scene {k}: {e}", path.display())))?;
        }
    }
    Ok(scenes)
}
