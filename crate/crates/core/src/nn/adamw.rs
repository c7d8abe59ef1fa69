use std::collections::BTreeMap;

use super::ParamStore;
use crate::{Error, Result, Tensor};

/// AdamW state. Moments are created lazily, shaped like their parameter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning-rate overrides for parameters whose name starts with the
    /// given prefix. The first matching prefix wins.
    pub lr_groups: Vec<(String, f64)>,
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_groups: Vec::new(),
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn with_group(mut self, prefix: impl Into<String>, lr: f64) -> Self {
        self.lr_groups.push((prefix.into(), lr));
        self
    }

    pub fn lr_for(&self, name: &str) -> f64 {
        self.lr_groups
            .iter()
            .find(|(p, _)| name.starts_with(p.as_str()))
            .map_or(self.lr, |(_, lr)| *lr)
    }
}

/// One AdamW update: decoupled decay `θ ← θ(1 − lr·wd)`, then the
/// bias-corrected Adam step. Clears every gradient afterwards.
pub fn adamw_step(store: &mut ParamStore, opt: &mut OptimizerState) -> Result<()> {
    if let Some((name, _)) = store.iter().find(|(_, p)| p.grad.is_none()) {
        return Err(Error::MissingGrad(name.to_string()));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let (b1, b2, eps, wd) = (opt.beta1, opt.beta2, opt.eps, opt.weight_decay);
    for (name, p) in store.iter_mut() {
        let lr = opt.lr_for(name);
        let g = p.grad.take().expect("checked above");
        let m = opt
            .first
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = opt
            .second
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let decay = 1.0 - lr * wd;
        for (((th, gv), mv), vv) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *th *= decay;
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *th -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
