//! Relation context for each query index `i`, built from the three branch
//! tokens `f^H_i, f^O_i, f^I_i` and the image tokens.
//!
//! All instances are processed at once: the three-token sets are stacked
//! as `[F^H; F^O; F^I]` (`3N × D`) and attention is masked so that row `a`
//! only sees rows `b` with `a ≡ b (mod N)`.

use super::config::ModelConfig;
use crate::nn::{attention, layer_norm, mlp, AttnOutput, Init, Session};
use crate::{Result, Tensor, Var};

/// Intermediate values of one relation-module application, for all `N`
/// instances. Row `i` (or rows `i`, `N+i`, `2N+i` of the stacked sets)
/// belongs to instance `i`.
#[derive(Debug, Clone)]
pub struct MureTrace {
    /// Ternary context `[N × D]`.
    pub f_hoi: Tensor,
    /// Self-attended unary tokens `[3N × D]`.
    pub unary: Option<Tensor>,
    /// Ternary context after unary embedding.
    pub f_tilde: Tensor,
    /// Pairwise tokens `f^HO, f^HI, f^OI`, each `[N × D]`.
    pub pair_tokens: Option<[Tensor; 3]>,
    /// Self-attended pairwise tokens `[3N × D]`.
    pub pairwise: Option<Tensor>,
    /// Ternary context after pairwise embedding.
    pub f_hat: Tensor,
    /// Output context `[N × D]`.
    pub m: Tensor,
    /// Head-averaged attention weights, by name: `unary_self`,
    /// `unary_cross`, `pairwise_self`, `pairwise_cross`, `image`.
    pub attention: Vec<(&'static str, Tensor)>,
}

impl MureTrace {
    pub fn weights(&self, name: &str) -> Option<&Tensor> {
        self.attention.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    /// Weights of instance `i` restricted to its own set: `3 × 3` for the
    /// self-attentions, `1 × 3` for the set cross-attentions and `1 × T`
    /// for `image`.
    pub fn instance_weights(&self, name: &str, i: usize) -> Option<Tensor> {
        let w = self.weights(name)?;
        let n = self.m.rows();
        let rows: Vec<usize> = if w.rows() == 3 * n { vec![i, n + i, 2 * n + i] } else { vec![i] };
        let cols: Vec<usize> = if name == "image" {
            (0..w.cols()).collect()
        } else {
            vec![i, n + i, 2 * n + i]
        };
        let data = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .map(|(r, c)| w.at2(r, c))
            .collect();
        Tensor::new(&[rows.len(), cols.len()], data).ok()
    }
}

pub(crate) fn init_layer(init: &mut Init, cfg: &ModelConfig, l: usize) -> Result<()> {
    let d = cfg.d;
    let p = format!("mure.layer.{l}");
    init.mlp(&format!("{p}.ternary"), 3 * d, d, d)?;
    for block in ["unary.self", "unary.cross", "pairwise.self", "pairwise.cross", "image.cross"] {
        init.layer_norm(&format!("{p}.{block}.ln"), d)?;
        init.attention(&format!("{p}.{block}.attn"), d)?;
    }
    for pair in ["ho", "hi", "oi"] {
        init.mlp(&format!("{p}.pairwise.{pair}"), 2 * d, d, d)?;
    }
    Ok(())
}

/// Additive masks keeping each instance inside its own three-token set:
/// `[3N × 3N]` for self-attention and `[N × 3N]` for cross-attention.
pub fn set_masks(n: usize) -> (Tensor, Tensor) {
    let allow = |a: usize, b: usize| if a % n == b % n { 0.0 } else { f64::NEG_INFINITY };
    let s = (0..3 * n).flat_map(|a| (0..3 * n).map(move |b| allow(a, b))).collect();
    let c = (0..n).flat_map(|a| (0..3 * n).map(move |b| allow(a, b))).collect();
    (
        Tensor::new(&[3 * n, 3 * n], s).expect("square mask"),
        Tensor::new(&[n, 3 * n], c).expect("cross mask"),
    )
}

/// `q + Attn(LN(q), kv)`, or bare `Attn(q, kv)`. Self-attention (`kv`
/// absent) attends over the normalized queries.
fn block(
    s: &mut Session,
    prefix: &str,
    q: Var,
    kv: Option<Var>,
    heads: usize,
    mask: Option<Var>,
    bare: bool,
) -> Result<AttnOutput> {
    let attn = format!("{prefix}.attn");
    if bare {
        return attention(s, &attn, q, kv.unwrap_or(q), heads, mask);
    }
    let h = layer_norm(s, &format!("{prefix}.ln"), q)?;
    let a = attention(s, &attn, h, kv.unwrap_or(h), heads, mask)?;
    Ok(AttnOutput {
        out: s.g.add(q, a.out)?,
        weights: a.weights,
    })
}

/// Relation context `m` (`[N × D]`) for layer `l` from branch tokens
/// `f = [F^H, F^O, F^I]` and image tokens `x`.
pub fn mure(s: &mut Session, cfg: &ModelConfig, l: usize, f: [Var; 3], x: Var) -> Result<(Var, MureTrace)> {
    let flags = &cfg.flags;
    if !flags.use_ternary {
        return Err(crate::Error::Config("relation module requires use_ternary".into()));
    }
    let p = format!("mure.layer.{l}");
    let n = s.g.value(f[0]).rows();
    let (h, bare) = (cfg.heads, flags.bare_mure_attention);
    let (self_mask, cross_mask) = set_masks(n);
    let self_mask = s.g.constant(self_mask);
    let cross_mask = s.g.constant(cross_mask);
    let mut attn = Vec::new();

    let cat = s.g.concat(&f)?;
    let f_hoi = mlp(s, &format!("{p}.ternary"), cat)?;

    let mut unary = None;
    let mut f_tilde = f_hoi;
    if flags.use_unary {
        let stacked = s.g.concat_rows(&f)?;
        let u = block(s, &format!("{p}.unary.self"), stacked, None, h, Some(self_mask), bare)?;
        attn.push(("unary_self", u.weights));
        let c = block(s, &format!("{p}.unary.cross"), f_hoi, Some(u.out), h, Some(cross_mask), bare)?;
        attn.push(("unary_cross", c.weights));
        unary = Some(s.g.value(u.out).clone());
        f_tilde = c.out;
    }

    let mut pair_tokens = None;
    let mut pairwise = None;
    let mut f_hat = f_tilde;
    if flags.use_pairwise {
        let mut toks = Vec::with_capacity(3);
        for (name, a, b) in [("ho", 0, 1), ("hi", 0, 2), ("oi", 1, 2)] {
            let c = s.g.concat(&[f[a], f[b]])?;
            toks.push(mlp(s, &format!("{p}.pairwise.{name}"), c)?);
        }
        let stacked = s.g.concat_rows(&toks)?;
        let ps = block(s, &format!("{p}.pairwise.self"), stacked, None, h, Some(self_mask), bare)?;
        attn.push(("pairwise_self", ps.weights));
        let c = block(s, &format!("{p}.pairwise.cross"), f_tilde, Some(ps.out), h, Some(cross_mask), bare)?;
        attn.push(("pairwise_cross", c.weights));
        pair_tokens = Some([0, 1, 2].map(|k| s.g.value(toks[k]).clone()));
        pairwise = Some(s.g.value(ps.out).clone());
        f_hat = c.out;
    }

    let m = block(s, &format!("{p}.image.cross"), f_hat, Some(x), h, None, bare)?;
    attn.push(("image", m.weights));
    let trace = MureTrace {
        f_hoi: s.g.value(f_hoi).clone(),
        unary,
        f_tilde: s.g.value(f_tilde).clone(),
        pair_tokens,
        pairwise,
        f_hat: s.g.value(f_hat).clone(),
        m: s.g.value(m.out).clone(),
        attention: attn,
    };
    Ok((m.out, trace))
}
