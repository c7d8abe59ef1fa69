use std::fs;
use std::io::{BufWriter, Write};

use rand::seq::SliceRandom;
use relhoi::matchloss::{batch_loss, HoiInstance, LossTerms};
use relhoi::model::{image_loss, init_params};
use relhoi::nn::{adamw_step, save_checkpoint, OptimizerState, ParamStore, Session};
use relhoi::rng::{labeled, StreamRng};
use relhoi::synth::Scene;
use relhoi::Graph;
use serde::{Deserialize, Serialize};

use crate::{load_scenes, CliError, RunConfig};

/// One line of the metrics log: batch-mean loss terms before the update
/// of step `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l1: f64,
    pub giou: f64,
    pub oc: f64,
    pub ic: f64,
    pub total: f64,
}

impl StepLog {
    fn new(step: usize, t: LossTerms) -> Self {
        Self {
            step,
            l1: t.l1,
            giou: t.giou,
            oc: t.oc,
            ic: t.ic,
            total: t.total,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub store: ParamStore,
    pub log: Vec<StepLog>,
}

/// Endless mini-batches: a fresh shuffle of the training set per epoch,
/// read in order. A batch may straddle two epochs.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: StreamRng,
}

impl Batches {
    fn new(n: usize, size: usize, rng: StreamRng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            size,
            rng,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.size);
        while out.len() < self.size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn diverged(step: usize, e: relhoi::Error) -> CliError {
    match e {
        relhoi::Error::InvalidBox(_) | relhoi::Error::Tensor(relhoi::TensorError::NonFinite(_)) => {
            CliError::Diverged { step, msg: e.to_string() }
        }
        other => other.into(),
    }
}

/// Trains from the seeded initialization for `cfg.steps` AdamW steps.
/// `on_step` sees each log entry together with the updated parameters.
pub fn train_on<F>(cfg: &RunConfig, scenes: &[Scene], mut on_step: F) -> Result<TrainRun, CliError>
where
    F: FnMut(&StepLog, &ParamStore) -> Result<(), CliError>,
{
    cfg.validate()?;
    if scenes.is_empty() && cfg.steps > 0 {
        return Err(CliError::Config("training set is empty".into()));
    }
    let model = &cfg.model;
    let mut store = init_params(model, cfg.seed)?;
    let mut opt = OptimizerState::new(cfg.lr_rest, cfg.weight_decay).with_group("encoder.", cfg.lr_encoder);
    let targets: Vec<Vec<HoiInstance>> = scenes.iter().map(|s| s.spec.instances()).collect();
    let mut batches = Batches::new(scenes.len(), cfg.batch_size, labeled(cfg.seed, "shuffle"));
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = batches.next_batch();
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store, true);
        let mut parts = Vec::with_capacity(idx.len());
        for &k in &idx {
            let (loss, _, _) = image_loss(&mut s, model, &scenes[k].image, &targets[k]).map_err(|e| diverged(step, e))?;
            parts.push(loss);
        }
        let (loss, terms) = batch_loss(s.g, &parts, &model.loss)?;
        let bound = s.into_bindings();
        if ![terms.l1, terms.giou, terms.oc, terms.ic, terms.total].iter().all(|v| v.is_finite()) {
            return Err(CliError::NonFinite { step, terms });
        }
        g.backward(loss.total)?;
        store.accumulate_grads(&g, &bound);
        adamw_step(&mut store, &mut opt)?;
        let entry = StepLog::new(step, terms);
        on_step(&entry, &store)?;
        log.push(entry);
    }
    Ok(TrainRun { store, log })
}

/// Loads the training set, trains, and writes the metrics log and the
/// checkpoint (every `save_every` steps and at the end).
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainRun, CliError> {
    cfg.validate_train()?;
    let data = cfg.train_data.as_deref().expect("validated");
    let ckpt = cfg.checkpoint.as_deref().expect("validated");
    let scenes = load_scenes(data, &cfg.model)?;
    if scenes.is_empty() && cfg.steps > 0 {
        return Err(CliError::Config(format!("{}: training set is empty", data.display())));
    }

    let metrics = cfg.metrics_path().expect("checkpoint is set");
    fs::create_dir_all(ckpt)?;
    if let Some(dir) = metrics.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut out = BufWriter::new(fs::File::create(&metrics)?);
    let run = train_on(cfg, &scenes, |entry, store| {
        serde_json::to_writer(&mut out, entry)?;
        out.write_all(b"\n")?;
        if cfg.save_every > 0 && (entry.step + 1) % cfg.save_every == 0 {
            out.flush()?;
            save_checkpoint(store, ckpt)?;
        }
        Ok(())
    });
    out.flush()?;
    let run = run?;
    save_checkpoint(&run.store, ckpt)?;
    Ok(run)
}
