//! Human-object interaction detection as set prediction, with three decoder
//! branches that exchange context through a multiplex relation embedding.
//!
//! The crate is self-contained: a small `f64` reverse-mode autodiff engine
//! ([`tensor`]), transformer building blocks and AdamW ([`nn`]), the
//! detector itself ([`model`]), Hungarian matching and the set losses
//! ([`matchloss`]), a synthetic scene generator ([`synth`]) and top-k
//! decoding with mAP evaluation ([`eval`]).
//!
//! The guide in `book/` walks through each piece; its snippets are compiled
//! as doc-tests of this crate.

pub mod eval;
pub mod matchloss;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use tensor::{Graph, Tensor, TensorError, Var};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("hungarian: {0}")]
    Matching(String),
    #[error("invalid box {0:?}: width and height must be positive")]
    InvalidBox([f64; 4]),
    #[error("class index {index} out of range (< {limit})")]
    ClassRange { index: usize, limit: usize },
    #[error("scene sampling failed after {0} attempts")]
    SamplingExhausted(usize),
    #[error("dataset line {line}: {msg}")]
    Dataset { line: usize, msg: String },
    #[error("evaluation: {0}")]
    Eval(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/blocks.md")]
    mod blocks {}
    #[doc = include_str!("../../../book/src/relation-context.md")]
    mod relation_context {}
    #[doc = include_str!("../../../book/src/fusion-and-heads.md")]
    mod fusion_and_heads {}
    #[doc = include_str!("../../../book/src/matching-and-losses.md")]
    mod matching_and_losses {}
    #[doc = include_str!("../../../book/src/synthetic-scenes.md")]
    mod synthetic_scenes {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
