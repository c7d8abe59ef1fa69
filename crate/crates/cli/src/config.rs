//! Run configuration: one JSON file whose `profile` supplies defaults for
//! the model and the optimizer.

use std::fs;
use std::path::{Path, PathBuf};

use relhoi::model::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Toy,
    Paper,
}

impl Profile {
    pub fn model(self) -> ModelConfig {
        match self {
            Profile::Toy => ModelConfig::toy(),
            Profile::Paper => ModelConfig::paper(),
        }
    }

    /// `(steps, batch_size, lr_rest)`.
    fn schedule(self) -> (usize, usize, f64) {
        match self {
            Profile::Toy => (3000, 4, 1e-3),
            Profile::Paper => (500_000, 16, 1e-4),
        }
    }
}

/// The file as written; every field but `profile` is optional.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    profile: Profile,
    /// Partial model config merged over the profile's.
    #[serde(default)]
    model: Option<Value>,
    steps: Option<usize>,
    batch_size: Option<usize>,
    lr_rest: Option<f64>,
    lr_encoder: Option<f64>,
    weight_decay: Option<f64>,
    seed: Option<u64>,
    train_data: Option<PathBuf>,
    eval_data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    metrics: Option<PathBuf>,
    k: Option<usize>,
    save_every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Learning rate of everything outside the image encoder.
    pub lr_rest: f64,
    pub lr_encoder: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Per-step loss log; defaults to `metrics.jsonl` inside the checkpoint
    /// directory.
    pub metrics: Option<PathBuf>,
    /// Detections kept per image at evaluation.
    pub k: usize,
    /// Checkpoint period in steps; 0 saves only at the end.
    pub save_every: usize,
}

impl RunConfig {
    /// Profile defaults with no data paths.
    pub fn from_profile(profile: Profile) -> Self {
        let model = profile.model();
        let (steps, batch_size, lr_rest) = profile.schedule();
        Self {
            profile,
            k: model.k_top,
            model,
            steps,
            batch_size,
            lr_rest,
            lr_encoder: lr_rest / 10.0,
            weight_decay: 1e-4,
            seed: 0,
            train_data: None,
            eval_data: None,
            checkpoint: None,
            metrics: None,
            save_every: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let raw: RawConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let mut cfg = Self::from_profile(raw.profile);
        if let Some(patch) = raw.model {
            let mut base = serde_json::to_value(&cfg.model).expect("model config serializes");
            merge(&mut base, patch);
            cfg.model = serde_json::from_value(base).map_err(|e| CliError::Config(format!("model: {e}")))?;
            cfg.k = cfg.model.k_top;
        }
        cfg.steps = raw.steps.unwrap_or(cfg.steps);
        cfg.batch_size = raw.batch_size.unwrap_or(cfg.batch_size);
        if let Some(lr) = raw.lr_rest {
            cfg.lr_rest = lr;
            cfg.lr_encoder = lr / 10.0;
        }
        cfg.lr_encoder = raw.lr_encoder.unwrap_or(cfg.lr_encoder);
        cfg.weight_decay = raw.weight_decay.unwrap_or(cfg.weight_decay);
        cfg.seed = raw.seed.unwrap_or(cfg.seed);
        cfg.train_data = raw.train_data;
        cfg.eval_data = raw.eval_data;
        cfg.checkpoint = raw.checkpoint;
        cfg.metrics = raw.metrics;
        cfg.k = raw.k.unwrap_or(cfg.k);
        cfg.save_every = raw.save_every.unwrap_or(cfg.save_every);
        Ok(cfg)
    }

    /// Reads and parses `path`. Relative data paths stay relative to the
    /// working directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, lr) in [("lr_rest", self.lr_rest), ("lr_encoder", self.lr_encoder)] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        Ok(())
    }

    /// Training also needs data to read and a checkpoint to write. Zero
    /// steps is allowed and saves the initialization.
    pub fn validate_train(&self) -> Result<(), CliError> {
        self.validate()?;
        if self.train_data.is_none() {
            return Err(CliError::Config("train_data is required".into()));
        }
        if self.checkpoint.is_none() {
            return Err(CliError::Config("checkpoint path is required".into()));
        }
        Ok(())
    }

    pub fn metrics_path(&self) -> Option<PathBuf> {
        self.metrics
            .clone()
            .or_else(|| self.checkpoint.as_ref().map(|c| c.join("metrics.jsonl")))
    }
}

/// Recursive object merge; non-object values in `patch` replace `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
