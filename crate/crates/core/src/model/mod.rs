//! The detector: patch-embedding encoder, three decoder branches (human,
//! object, interaction), the relation module, attentive fusion and the
//! shared prediction heads.

mod config;
mod mure;

pub use config::{Flags, ModelConfig};
pub use mure::{mure, set_masks, MureTrace};

use crate::matchloss::{total_loss, HoiInstance, LossBreakdown, SetLoss};
use crate::nn::{decoder_layer, encoder_layer, linear, mlp, positional_encoding, Init, ParamStore, Session};
use crate::rng::labeled;
use crate::{Error, Graph, Result, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Human,
    Object,
    Interaction,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Human, Branch::Object, Branch::Interaction];

    pub fn tag(self) -> &'static str {
        match self {
            Branch::Human => "h",
            Branch::Object => "o",
            Branch::Interaction => "i",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Fresh parameters for `cfg`, drawn from the `init` stream of `seed`.
///
/// Every parameter exists regardless of the ablation flags; disabled parts
/// simply never enter the graph.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.d;
    let mut store = ParamStore::new();
    let mut rng = labeled(seed, "init");
    let mut init = Init { store: &mut store, rng: &mut rng };
    init.linear("encoder.patch_embed", cfg.patch_dim(), d)?;
    for e in 0..cfg.encoder_layers {
        init.encoder_layer(&format!("encoder.layer.{e}"), d)?;
    }
    for b in Branch::ALL {
        init.uniform(&format!("branch.{}.queries", b.tag()), &[cfg.queries, d], -1.0, 1.0)?;
    }
    let fuse_in = if cfg.flags.fusion_conditioning { 2 * d } else { d };
    for l in 0..cfg.branch_layers {
        for b in Branch::ALL {
            init.decoder_layer(&format!("branch.{}.layer.{l}.dec", b.tag()), d)?;
        }
        mure::init_layer(&mut init, cfg, l)?;
        for b in Branch::ALL {
            for part in ["gate", "value"] {
                init.mlp(&format!("fusion.layer.{l}.{}.{part}", b.tag()), fuse_in, d, d)?;
            }
        }
    }
    init.mlp("heads.hbox", d, d, 4)?;
    init.mlp("heads.obox", d, d, 4)?;
    init.mlp("heads.oc", d, d, cfg.num_obj + 1)?;
    init.mlp("heads.ic", d, d, cfg.num_int)?;
    Ok(store)
}

/// Non-overlapping `patch × patch` tiles of an `H × W × C` image, one row
/// per tile in row-major grid order, each flattened as `(y, x, channel)`.
pub fn patchify(cfg: &ModelConfig, image: &Tensor) -> Result<Tensor> {
    let [h, w, c] = cfg.image;
    if image.shape() != [h, w, c] {
        return Err(Error::Config(format!("image shape {:?} does not match config {:?}", image.shape(), cfg.image)));
    }
    let p = cfg.patch;
    if h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("image {h}×{w} is not divisible by patch {p}")));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(h * w * c);
    for gy in 0..h / p {
        for gx in 0..w / p {
            for y in gy * p..(gy + 1) * p {
                let start = (y * w + gx * p) * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Ok(Tensor::new(&[cfg.tokens(), cfg.patch_dim()], out)?)
}

/// Image tokens `X: [T × D]`: patch projection plus positional encoding,
/// then the encoder layers.
pub fn encode_image(s: &mut Session, cfg: &ModelConfig, image: &Tensor) -> Result<Var> {
    let patches = s.g.constant(patchify(cfg, image)?);
    let (rows, cols) = cfg.grid();
    let pe = s.g.constant(positional_encoding(rows, cols, cfg.d)?);
    let proj = linear(s, "encoder.patch_embed", patches)?;
    let mut x = s.g.add(proj, pe)?;
    for e in 0..cfg.encoder_layers {
        x = encoder_layer(s, &format!("encoder.layer.{e}"), x, cfg.heads)?;
    }
    Ok(x)
}

/// One decoder step of branch `b` at layer `l`: `F = Dec(Q_prev, X)`.
pub fn branch_layer(
    s: &mut Session,
    cfg: &ModelConfig,
    b: Branch,
    l: usize,
    q_prev: Var,
    x: Var,
) -> Result<crate::nn::DecoderOutput> {
    decoder_layer(s, &format!("branch.{}.layer.{l}.dec", b.tag()), q_prev, x, cfg.heads)
}

/// Refines branch tokens `f` with relation context `m`:
/// `q = f + α ⊙ MLP_v(z)`, `α = σ(MLP_α(z))`, with `z = [f; m]`.
///
/// Without conditioning `z = m`; without channel attention `α = 1`.
/// Returns `q` and, when gated, `α`.
pub fn attentive_fusion(
    s: &mut Session,
    cfg: &ModelConfig,
    b: Branch,
    l: usize,
    f: Var,
    m: Var,
) -> Result<(Var, Option<Var>)> {
    let p = format!("fusion.layer.{l}.{}", b.tag());
    let z = if cfg.flags.fusion_conditioning { s.g.concat(&[f, m])? } else { m };
    let v = mlp(s, &format!("{p}.value"), z)?;
    let (v, alpha) = if cfg.flags.fusion_channel {
        let a = mlp(s, &format!("{p}.gate"), z)?;
        let a = s.g.sigmoid(a);
        (s.g.mul(a, v)?, Some(a))
    } else {
        (v, None)
    };
    Ok((s.g.add(f, v)?, alpha))
}

/// Head outputs of one layer, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    /// `[N × 4]` in `[0, 1]`.
    pub human_boxes: Var,
    pub object_boxes: Var,
    /// `[N × (num_obj + 1)]`; the last column is background.
    pub obj_logits: Var,
    /// `[N × num_int]`.
    pub int_logits: Var,
    pub obj_probs: Var,
    pub int_probs: Var,
}

impl LayerOutput {
    pub fn predictions(&self, g: &Graph) -> PredictionSet {
        let rows4 = |v: Var| -> Vec<[f64; 4]> {
            g.value(v)
                .data()
                .chunks(4)
                .map(|r| [r[0], r[1], r[2], r[3]])
                .collect()
        };
        let rows = |v: Var| -> Vec<Vec<f64>> {
            let t = g.value(v);
            t.data().chunks(t.cols()).map(<[f64]>::to_vec).collect()
        };
        PredictionSet {
            human_boxes: rows4(self.human_boxes),
            object_boxes: rows4(self.object_boxes),
            obj_probs: rows(self.obj_probs),
            int_probs: rows(self.int_probs),
        }
    }
}

/// Per-query predictions of one layer as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub human_boxes: Vec<[f64; 4]>,
    pub object_boxes: Vec<[f64; 4]>,
    /// Softmax over `num_obj + 1` classes, background last.
    pub obj_probs: Vec<Vec<f64>>,
    pub int_probs: Vec<Vec<f64>>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.human_boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.human_boxes.is_empty()
    }

    pub fn num_obj(&self) -> usize {
        self.obj_probs.first().map_or(0, |r| r.len().saturating_sub(1))
    }

    pub fn num_int(&self) -> usize {
        self.int_probs.first().map_or(0, Vec::len)
    }
}

/// Applies the shared heads to refined tokens `[Q^H, Q^O, Q^I]`.
pub fn predict_heads(s: &mut Session, q: [Var; 3]) -> Result<LayerOutput> {
    let hb = mlp(s, "heads.hbox", q[0])?;
    let ob = mlp(s, "heads.obox", q[1])?;
    let oc = mlp(s, "heads.oc", q[1])?;
    let ic = mlp(s, "heads.ic", q[2])?;
    Ok(LayerOutput {
        human_boxes: s.g.sigmoid(hb),
        object_boxes: s.g.sigmoid(ob),
        obj_logits: oc,
        int_logits: ic,
        obj_probs: s.g.softmax(oc),
        int_probs: s.g.sigmoid(ic),
    })
}

/// What happened inside one branch layer.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Task-specific tokens `F^τ`, by branch.
    pub task: [Var; 3],
    /// Refined tokens `Q^τ` passed to the next layer.
    pub refined: [Var; 3],
    /// Head-averaged decoder cross-attention into the image, `[N × T]`.
    pub branch_cross: [Tensor; 3],
    pub mure: Option<MureTrace>,
    /// Channel attention per branch when fusion ran gated.
    pub alpha: [Option<Var>; 3],
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub tokens: Var,
    /// One entry per branch layer; the last is used for inference.
    pub layers: Vec<LayerOutput>,
    pub traces: Vec<LayerTrace>,
}

impl Forward {
    pub fn last(&self) -> &LayerOutput {
        self.layers.last().expect("at least one layer")
    }
}

pub fn forward(s: &mut Session, cfg: &ModelConfig, image: &Tensor) -> Result<Forward> {
    cfg.validate()?;
    let x = encode_image(s, cfg, image)?;
    let mut q_prev = [
        s.param("branch.h.queries")?,
        s.param("branch.o.queries")?,
        s.param("branch.i.queries")?,
    ];
    let propagate = cfg.flags.propagate();
    let mut layers = Vec::with_capacity(cfg.branch_layers);
    let mut traces = Vec::with_capacity(cfg.branch_layers);
    for l in 0..cfg.branch_layers {
        let mut task = q_prev;
        let mut cross: Vec<Tensor> = Vec::with_capacity(3);
        for b in Branch::ALL {
            let out = branch_layer(s, cfg, b, l, q_prev[b.index()], x)?;
            task[b.index()] = out.out;
            cross.push(out.cross_weights);
        }
        let mut refined = task;
        let mut alpha = [None; 3];
        let mut trace = None;
        if cfg.flags.relation_active() {
            let (m, t) = mure(s, cfg, l, task, x)?;
            trace = Some(t);
            for b in Branch::ALL {
                if propagate[b.index()] {
                    let (qb, a) = attentive_fusion(s, cfg, b, l, task[b.index()], m)?;
                    refined[b.index()] = qb;
                    alpha[b.index()] = a;
                }
            }
        }
        layers.push(predict_heads(s, refined)?);
        let [ch, co, ci]: [Tensor; 3] = cross.try_into().expect("three branches");
        traces.push(LayerTrace {
            task,
            refined,
            branch_cross: [ch, co, ci],
            mure: trace,
            alpha,
        });
        q_prev = refined;
    }
    Ok(Forward { tokens: x, layers, traces })
}

/// Forward pass and summed per-layer loss of one image.
pub fn image_loss(
    s: &mut Session,
    cfg: &ModelConfig,
    image: &Tensor,
    gts: &[HoiInstance],
) -> Result<(SetLoss, LossBreakdown, Forward)> {
    let fwd = forward(s, cfg, image)?;
    let (loss, breakdown) = total_loss(s.g, &fwd.layers, gts, &cfg.loss)?;
    Ok((loss, breakdown, fwd))
}

/// Inference: last-layer predictions for one image.
pub fn predict(store: &ParamStore, cfg: &ModelConfig, image: &Tensor) -> Result<PredictionSet> {
    let mut g = Graph::new();
    let mut s = Session::new(&mut g, store, false);
    let fwd = forward(&mut s, cfg, image)?;
    Ok(fwd.last().predictions(s.g))
}
