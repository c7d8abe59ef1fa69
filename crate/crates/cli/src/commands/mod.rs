pub mod dump_attn;
pub mod eval;
pub mod gradcheck;
pub mod synth;
pub mod train;
