use std::fs;
use std::path::Path;

use relhoi::eval::{class_census, evaluate, EvalReport};
use relhoi::matchloss::HoiInstance;
use relhoi::model::{init_params, predict, ModelConfig};
use relhoi::nn::{load_checkpoint_into, ParamStore};
use relhoi::synth::Scene;

use crate::{load_scenes, CliError, RunConfig};

/// Last-layer predictions for every scene, decoded to `k` detections and
/// scored. `train` supplies the census that decides which classes are
/// rare.
pub fn evaluate_store(
    store: &ParamStore,
    model: &ModelConfig,
    scenes: &[Scene],
    train: &[Scene],
    k: usize,
) -> Result<EvalReport, CliError> {
    if scenes.is_empty() {
        return Err(CliError::Core(relhoi::Error::Eval("empty dataset".into())));
    }
    let preds = scenes
        .iter()
        .map(|s| predict(store, model, &s.image))
        .collect::<relhoi::Result<Vec<_>>>()?;
    let gts: Vec<_> = scenes.iter().map(|s| s.spec.instances()).collect();
    let train_gts: Vec<HoiInstance> = train.iter().flat_map(|s| s.spec.instances()).collect();
    let census = class_census(&train_gts);
    Ok(evaluate(&preds, &gts, &census, k)?)
}

/// Loads a checkpoint shaped for `cfg.model` and checks it against the
/// parameter layout the config implies.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<ParamStore, CliError> {
    let template = init_params(&cfg.model, 0)?;
    load_checkpoint_into(checkpoint, &template).map_err(|e| match e {
        relhoi::Error::Checkpoint(msg) => CliError::Config(format!("checkpoint does not fit the model: {msg}")),
        other => other.into(),
    })
}

/// Evaluates `checkpoint` on `data` and writes the report to `out`. The
/// rare split is counted on `cfg.train_data` when set, else on `data`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<EvalReport, CliError> {
    cfg.validate()?;
    let store = load_model(cfg, checkpoint)?;
    let scenes = load_scenes(data, &cfg.model)?;
    if scenes.is_empty() {
        return Err(CliError::Core(relhoi::Error::Eval(format!("{}: empty dataset", data.display()))));
    }
    let train = match &cfg.train_data {
        Some(p) => load_scenes(p, &cfg.model)?,
        None => scenes.clone(),
    };
    let report = evaluate_store(&store, &cfg.model, &scenes, &train, cfg.k)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    fs::write(out, json)?;
    Ok(report)
}
