//! Finite-difference checks of every block on its own and of the whole
//! model plus loss at a tiny size.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use relhoi::matchloss::{total_loss, HoiInstance};
use relhoi::model::{attentive_fusion, image_loss, init_params, mure, predict_heads, Branch, ModelConfig};
use relhoi::nn::{attention, decoder_layer, encoder_layer, layer_norm, linear, mlp, Init, ParamStore, Session};
use relhoi::rng::{labeled, stream, uniform};
use relhoi::tensor::grad_check;
use relhoi::{Tensor, Var};
use serde::Serialize;

use crate::CliError;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `D = 8`, `N = 2`, one branch layer, a 2×2 token grid, two object and
/// two interaction classes.
pub fn gradcheck_model() -> ModelConfig {
    ModelConfig {
        d: 8,
        patch: 8,
        image: [16, 16, 3],
        encoder_layers: 1,
        branch_layers: 1,
        queries: 2,
        heads: 2,
        num_obj: 2,
        num_int: 2,
        k_top: 4,
        ..ModelConfig::micro()
    }
}

/// Reporting group of a parameter: one encoder or decoder layer, one set
/// of queries, one relation-module component, one fusion branch or one
/// head.
pub fn param_group(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let keep = match parts.as_slice() {
        ["encoder", "layer", ..] => 3,
        ["branch", _, "queries"] => 3,
        ["branch", ..] | ["mure", ..] | ["fusion", ..] => 4,
        _ => 2,
    };
    parts[..keep.min(parts.len())].join(".")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupResult {
    pub group: String,
    /// Largest relative error over the group's tensors.
    pub worst: f64,
    /// Number of checked scalars.
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.worst).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.worst <= self.tolerance)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.groups.iter().map(|g| g.group.len()).max().unwrap_or(0);
        for g in &self.groups {
            let verdict = if g.worst <= self.tolerance { "ok" } else { "FAIL" };
            writeln!(f, "{:width$}  {:>6}  {:.3e}  {verdict}", g.group, g.elements, g.worst)?;
        }
        write!(f, "worst {:.3e} (tolerance {:.0e})", self.worst(), self.tolerance)
    }
}

fn grad_failure(e: relhoi::Error) -> CliError {
    CliError::GradCheck(e.to_string())
}

/// Checks one block. `params` are bound by name, `inputs` follow as extra
/// leaves, and the outputs of `f` are reduced to a scalar with fixed
/// random weights so that no output direction is left untested.
pub fn check_block<F>(
    group: &str,
    params: Vec<(String, Tensor)>,
    inputs: Vec<(String, Tensor)>,
    f: F,
) -> Result<GroupResult, CliError>
where
    F: Fn(&mut Session, &[Var]) -> relhoi::Result<Vec<Var>>,
{
    let np = params.len();
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let all: Vec<(String, Tensor, bool)> = params.into_iter().chain(inputs).map(|(n, t)| (n, t, true)).collect();
    let elements = all.iter().map(|(_, t, _)| t.len()).sum();
    let report = grad_check::<_, relhoi::Error>(
        &all,
        |g, vars| {
            let mut s = Session::prebound(g, names.iter().cloned().zip(vars[..np].iter().copied()));
            let outs = f(&mut s, &vars[np..])?;
            let mut rng = stream(0x5eed, 9);
            let mut acc = None;
            for o in outs {
                let w = uniform(&mut rng, s.g.shape(o), -1.0, 1.0);
                let w = s.g.constant(w);
                let p = s.g.mul(o, w)?;
                let term = s.g.sum(p);
                acc = Some(match acc {
                    None => term,
                    Some(a) => s.g.add(a, term)?,
                });
            }
            acc.ok_or_else(|| relhoi::Error::Config("block produced no output".into()))
        },
        STEP,
        TOLERANCE,
    )
    .map_err(grad_failure)?;
    Ok(GroupResult {
        group: group.to_string(),
        worst: report.worst(),
        elements,
    })
}

fn store_of(seed: u64, build: impl FnOnce(&mut Init) -> relhoi::Result<()>) -> Result<Vec<(String, Tensor)>, CliError> {
    let mut store = ParamStore::new();
    let mut rng = stream(seed, 1);
    build(&mut Init { store: &mut store, rng: &mut rng })?;
    Ok(perturbed(&store, "", seed))
}

/// Parameters under `prefix`, nudged off their initial values so that
/// zero biases and unit gains do not hide errors.
fn perturbed(store: &ParamStore, prefix: &str, seed: u64) -> Vec<(String, Tensor)> {
    let mut rng = stream(seed, 2);
    store
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, p)| {
            let noise = uniform(&mut rng, p.value.shape(), -0.3, 0.3);
            let data = p.value.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
            (n.to_string(), Tensor::new(p.value.shape(), data).expect("same shape"))
        })
        .collect()
}

fn input(name: &str, seed: u64, shape: &[usize]) -> (String, Tensor) {
    (name.to_string(), uniform(&mut labeled(seed, name), shape, -1.0, 1.0))
}

fn random_gts(seed: u64, count: usize, cfg: &ModelConfig) -> Vec<HoiInstance> {
    let mut r = stream(seed, 4);
    (0..count)
        .map(|_| {
            let mut b = || [r.gen_range(0.25..0.75), r.gen_range(0.25..0.75), r.gen_range(0.1..0.4), r.gen_range(0.1..0.4)];
            let (human_box, object_box) = (b(), b());
            HoiInstance {
                human_box,
                object_box,
                obj_class: r.gen_range(0..cfg.num_obj),
                int_class: r.gen_range(0..cfg.num_int),
            }
        })
        .collect()
}

/// Each building block on its own, with small random inputs.
pub fn block_checks(seed: u64) -> Result<Vec<GroupResult>, CliError> {
    let cfg = gradcheck_model();
    let (d, n, t) = (cfg.d, cfg.queries, cfg.tokens());
    let mut out = Vec::new();

    out.push(check_block(
        "block.linear",
        store_of(seed, |i| i.linear("blk", 5, 3))?,
        vec![input("x", seed, &[4, 5])],
        |s, x| Ok(vec![linear(s, "blk", x[0])?]),
    )?);
    out.push(check_block(
        "block.mlp",
        store_of(seed, |i| i.mlp("blk", 5, 6, 3))?,
        vec![input("x", seed, &[4, 5])],
        |s, x| Ok(vec![mlp(s, "blk", x[0])?]),
    )?);
    out.push(check_block(
        "block.layer_norm",
        store_of(seed, |i| i.layer_norm("blk", 6))?,
        vec![input("x", seed, &[3, 6])],
        |s, x| Ok(vec![layer_norm(s, "blk", x[0])?]),
    )?);
    // Row r may attend to keys 0..=r+1 only.
    let mask: Vec<f64> = (0..3)
        .flat_map(|r| (0..5).map(move |c| if c <= r + 1 { 0.0 } else { f64::NEG_INFINITY }))
        .collect();
    let mask = Tensor::new(&[3, 5], mask)?;
    out.push(check_block(
        "block.attention",
        store_of(seed, |i| i.attention("blk", d))?,
        vec![input("q", seed, &[3, d]), input("kv", seed, &[5, d])],
        |s, x| {
            let m = s.g.constant(mask.clone());
            Ok(vec![attention(s, "blk", x[0], x[1], 2, Some(m))?.out])
        },
    )?);
    out.push(check_block(
        "block.encoder_layer",
        store_of(seed, |i| i.encoder_layer("blk", d))?,
        vec![input("x", seed, &[4, d])],
        |s, x| Ok(vec![encoder_layer(s, "blk", x[0], 2)?]),
    )?);
    out.push(check_block(
        "block.decoder_layer",
        store_of(seed, |i| i.decoder_layer("blk", d))?,
        vec![input("q", seed, &[3, d]), input("x", seed, &[4, d])],
        |s, x| Ok(vec![decoder_layer(s, "blk", x[0], x[1], 2)?.out]),
    )?);

    let store = init_params(&cfg, seed)?;
    let tokens = || vec![input("fh", seed, &[n, d]), input("fo", seed, &[n, d]), input("fi", seed, &[n, d])];
    let mut mure_inputs = tokens();
    mure_inputs.push(input("image", seed, &[t, d]));
    out.push(check_block(
        "block.mure",
        perturbed(&store, "mure.", seed),
        mure_inputs,
        |s, x| Ok(vec![mure(s, &cfg, 0, [x[0], x[1], x[2]], x[3])?.0]),
    )?);
    out.push(check_block(
        "block.fusion",
        perturbed(&store, "fusion.layer.0.h.", seed),
        vec![input("f", seed, &[n, d]), input("m", seed, &[n, d])],
        |s, x| {
            let (q, alpha) = attentive_fusion(s, &cfg, Branch::Human, 0, x[0], x[1])?;
            Ok(std::iter::once(q).chain(alpha).collect())
        },
    )?);
    out.push(check_block("block.heads", perturbed(&store, "heads.", seed), tokens(), |s, x| {
        let o = predict_heads(s, [x[0], x[1], x[2]])?;
        Ok(vec![o.human_boxes, o.object_boxes, o.obj_probs, o.int_probs])
    })?);
    let gts = random_gts(seed, 2, &cfg);
    out.push(check_block("block.set_loss", perturbed(&store, "heads.", seed), tokens(), |s, x| {
        let o = predict_heads(s, [x[0], x[1], x[2]])?;
        Ok(vec![total_loss(s.g, &[o], &gts, &cfg.loss)?.0.total])
    })?);
    Ok(out)
}

/// Every parameter of the tiny model under the full training loss, one
/// result per [`param_group`].
pub fn model_check(seed: u64) -> Result<Vec<GroupResult>, CliError> {
    let cfg = gradcheck_model();
    let store = init_params(&cfg, seed)?;
    let image = uniform(&mut stream(seed, 5), &cfg.image, 0.0, 1.0);
    let gts = random_gts(seed, 2, &cfg);
    let inputs = store.named_tensors();
    let names: Vec<String> = inputs.iter().map(|(n, _, _)| n.clone()).collect();
    let report = grad_check::<_, relhoi::Error>(
        &inputs,
        |g, vars| {
            let mut s = Session::prebound(g, names.iter().cloned().zip(vars.iter().copied()));
            Ok(image_loss(&mut s, &cfg, &image, &gts)?.0.total)
        },
        STEP,
        TOLERANCE,
    )
    .map_err(grad_failure)?;
    let mut groups: BTreeMap<String, GroupResult> = BTreeMap::new();
    for (c, (_, t, _)) in report.checks.iter().zip(&inputs) {
        let key = param_group(&c.name);
        let e = groups.entry(key.clone()).or_insert(GroupResult {
            group: key,
            worst: 0.0,
            elements: 0,
        });
        e.worst = e.worst.max(c.max_rel_error.unwrap_or(0.0));
        e.elements += t.len();
    }
    Ok(groups.into_values().collect())
}

/// Block checks followed by the whole-model groups.
pub fn cmd_gradcheck(seed: u64) -> Result<GradcheckReport, CliError> {
    let mut groups = block_checks(seed)?;
    groups.extend(model_check(seed)?);
    Ok(GradcheckReport {
        tolerance: TOLERANCE,
        groups,
    })
}
