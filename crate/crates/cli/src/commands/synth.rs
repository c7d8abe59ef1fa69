use std::path::Path;

use relhoi::synth::{generate_dataset, interaction_census, save_dataset, NUM_INT};

use crate::{CliError, RunConfig};

/// Writes `count` scenes drawn from `cfg.seed` at the model's canvas size
/// and returns how many scenes contain each interaction.
pub fn cmd_synth(cfg: &RunConfig, count: usize, out: &Path, pixels: bool) -> Result<[usize; NUM_INT], CliError> {
    cfg.validate()?;
    let [h, w, c] = cfg.model.image;
    if c != 3 {
        return Err(CliError::Config(format!("scenes are RGB, model expects {c} channels")));
    }
    let scenes = generate_dataset(cfg.seed, count, [h, w])?;
    save_dataset(&scenes, out, pixels)?;
    let specs: Vec<_> = scenes.iter().map(|s| &s.spec).collect();
    Ok(interaction_census(&specs))
}
