//! Transformer building blocks, parameter storage, AdamW and checkpoints.

mod adamw;
mod checkpoint;
mod layers;
mod params;

pub use adamw::{adamw_step, OptimizerState};
pub use checkpoint::{load_checkpoint, load_checkpoint_into, save_checkpoint, Manifest, ManifestEntry, FORMAT_VERSION};
pub use layers::{
    attention, decoder_layer, encoder_layer, layer_norm, linear, mlp, positional_encoding, AttnOutput,
    DecoderOutput, LN_EPS,
};
pub use params::{Init, Param, ParamStore, Session};
