use serde::{Deserialize, Serialize};

use super::giou::{giou, BoxCxCyWh};
use super::hungarian::{hungarian, CostMatrix, MatchResult};
use crate::model::{LayerOutput, PredictionSet};
use crate::{Error, Graph, Result, Tensor, Var};

/// Ground-truth or decoded interaction: human box, object box, object
/// class and interaction class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoiInstance {
    pub human_box: BoxCxCyWh,
    pub object_box: BoxCxCyWh,
    pub obj_class: usize,
    pub int_class: usize,
}

/// Loss weights and shaping constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub lambda_oc: f64,
    pub lambda_ic: f64,
    /// Cross-entropy weight of queries assigned to the background class.
    pub bg_weight: f64,
    /// Focal-loss class balance; `None` weights positives and negatives
    /// equally.
    pub focal_alpha: Option<f64>,
    pub focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_l1: 2.5,
            lambda_giou: 1.0,
            lambda_oc: 1.0,
            lambda_ic: 1.0,
            bg_weight: 0.1,
            focal_alpha: Some(0.25),
            focal_gamma: 2.0,
        }
    }
}

impl LossConfig {
    /// `λ_L1·l1 + λ_GIoU·giou + λ_oc·oc + λ_ic·ic`, in that order.
    pub fn weigh(&self, l1: f64, giou: f64, oc: f64, ic: f64) -> f64 {
        self.lambda_l1 * l1 + self.lambda_giou * giou + self.lambda_oc * oc + self.lambda_ic * ic
    }
}

/// `C[g,i]` = box L1 + (2 − GIoU_H − GIoU_O) + (1 − p^O) + (1 − p^I), each
/// term scaled by its loss weight.
pub fn matching_cost(preds: &PredictionSet, gts: &[HoiInstance], cfg: &LossConfig) -> Result<CostMatrix> {
    let n = preds.len();
    let mut data = Vec::with_capacity(gts.len() * n);
    for gt in gts {
        let num_obj = preds.num_obj();
        if gt.obj_class >= num_obj {
            return Err(Error::ClassRange { index: gt.obj_class, limit: num_obj });
        }
        if gt.int_class >= preds.num_int() {
            return Err(Error::ClassRange { index: gt.int_class, limit: preds.num_int() });
        }
        for i in 0..n {
            let (hb, ob) = (&preds.human_boxes[i], &preds.object_boxes[i]);
            let l1: f64 = (0..4)
                .map(|k| (hb[k] - gt.human_box[k]).abs() + (ob[k] - gt.object_box[k]).abs())
                .sum();
            let gi = 2.0 - giou(hb, &gt.human_box)? - giou(ob, &gt.object_box)?;
            let oc = 1.0 - preds.obj_probs[i][gt.obj_class];
            let ic = 1.0 - preds.int_probs[i][gt.int_class];
            data.push(cfg.weigh(l1, gi, oc, ic));
        }
    }
    CostMatrix::new(gts.len(), n, data)
}

/// The four loss terms of one prediction layer, as graph scalars.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l1: Var,
    pub giou: Var,
    pub oc: Var,
    pub ic: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> [f64; 4] {
        [self.l1, self.giou, self.oc, self.ic].map(|v| g.value(v).data()[0])
    }

    /// Records the weighted total with the same operation order as
    /// [`LossConfig::weigh`], so the two agree bit for bit.
    pub fn weighted_total(&self, g: &mut Graph, cfg: &LossConfig) -> Result<Var> {
        let a = g.scale(self.l1, cfg.lambda_l1);
        let b = g.scale(self.giou, cfg.lambda_giou);
        let c = g.scale(self.oc, cfg.lambda_oc);
        let d = g.scale(self.ic, cfg.lambda_ic);
        let ab = g.add(a, b)?;
        let abc = g.add(ab, c)?;
        Ok(g.add(abc, d)?)
    }

    fn combine(g: &mut Graph, parts: &[LossVars], scale: Option<f64>) -> Result<LossVars> {
        let mut fold = |pick: fn(&LossVars) -> Var| -> Result<Var> {
            let mut acc = pick(&parts[0]);
            for p in &parts[1..] {
                acc = g.add(acc, pick(p))?;
            }
            Ok(match scale {
                Some(s) => g.scale(acc, s),
                None => acc,
            })
        };
        Ok(LossVars {
            l1: fold(|p| p.l1)?,
            giou: fold(|p| p.giou)?,
            oc: fold(|p| p.oc)?,
            ic: fold(|p| p.ic)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l1: f64,
    pub giou: f64,
    pub oc: f64,
    pub ic: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn new([l1, giou, oc, ic]: [f64; 4], cfg: &LossConfig) -> Self {
        Self {
            l1,
            giou,
            oc,
            ic,
            total: cfg.weigh(l1, giou, oc, ic),
        }
    }
}

/// Summed loss terms with the per-layer contributions they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub giou: f64,
    pub oc: f64,
    pub ic: f64,
    pub total: f64,
    pub per_layer: Vec<LossTerms>,
}

impl LossBreakdown {
    pub fn terms(&self) -> LossTerms {
        LossTerms {
            l1: self.l1,
            giou: self.giou,
            oc: self.oc,
            ic: self.ic,
            total: self.total,
        }
    }
}

/// Graph scalars for a whole loss: the summed terms and their weighted
/// total.
#[derive(Debug, Clone, Copy)]
pub struct SetLoss {
    pub terms: LossVars,
    pub total: Var,
}

/// Per-box GIoU of `pred: [M × 4]` against constant boxes `target`, as an
/// `[M × 1]` graph node.
pub fn giou_graph(g: &mut Graph, pred: Var, target: &[BoxCxCyWh]) -> Result<Var> {
    let m = target.len();
    let col = |k: usize| Tensor::new(&[m, 1], target.iter().map(|b| b[k]).collect());
    let (tcx, tcy, tw, th) = (col(0)?, col(1)?, col(2)?, col(3)?);
    let corner = |c: &Tensor, s: &Tensor, sign: f64| {
        let d = c.data().iter().zip(s.data()).map(|(a, b)| a + sign * 0.5 * b).collect();
        Tensor::new(&[m, 1], d)
    };
    let tx0 = g.constant(corner(&tcx, &tw, -1.0)?);
    let tx1 = g.constant(corner(&tcx, &tw, 1.0)?);
    let ty0 = g.constant(corner(&tcy, &th, -1.0)?);
    let ty1 = g.constant(corner(&tcy, &th, 1.0)?);
    let tarea = g.constant(Tensor::new(
        &[m, 1],
        target.iter().map(|b| b[2] * b[3]).collect(),
    )?);

    let cx = g.slice(pred, 0, 1)?;
    let cy = g.slice(pred, 1, 2)?;
    let w = g.slice(pred, 2, 3)?;
    let h = g.slice(pred, 3, 4)?;
    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    let px0 = g.sub(cx, hw)?;
    let px1 = g.add(cx, hw)?;
    let py0 = g.sub(cy, hh)?;
    let py1 = g.add(cy, hh)?;

    let ix1 = g.minimum(px1, tx1)?;
    let ix0 = g.maximum(px0, tx0)?;
    let iy1 = g.minimum(py1, ty1)?;
    let iy0 = g.maximum(py0, ty0)?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.relu(iw);
    let ih = g.sub(iy1, iy0)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let parea = g.mul(w, h)?;
    let sum_area = g.add(parea, tarea)?;
    let union = g.sub(sum_area, inter)?;
    let iou = g.div(inter, union)?;

    let cx1 = g.maximum(px1, tx1)?;
    let cx0 = g.minimum(px0, tx0)?;
    let cy1 = g.maximum(py1, ty1)?;
    let cy0 = g.minimum(py0, ty0)?;
    let cw = g.sub(cx1, cx0)?;
    let ch = g.sub(cy1, cy0)?;
    let carea = g.mul(cw, ch)?;
    let empty = g.sub(carea, union)?;
    let frac = g.div(empty, carea)?;
    Ok(g.sub(iou, frac)?)
}

/// Loss terms of one layer under a fixed matching.
///
/// * `l1`: summed L1 error of both boxes, averaged over matched pairs.
/// * `giou`: `(1 − GIoU_H) + (1 − GIoU_O)`, averaged over matched pairs.
/// * `oc`: weighted cross-entropy; matched queries target their object
///   class (weight 1), the rest target background (weight `bg_weight`);
///   normalized by the total weight.
/// * `ic`: sigmoid focal loss against one-hot interaction targets for
///   matched queries and all-zero targets otherwise, summed and divided by
///   `max(1, #pairs)`.
pub fn layer_losses(
    g: &mut Graph,
    out: &LayerOutput,
    gts: &[HoiInstance],
    matching: &MatchResult,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let n = g.value(out.obj_logits).rows();
    let num_obj = g.value(out.obj_logits).cols() - 1;
    let num_int = g.value(out.int_logits).cols();
    let mpairs = matching.pairs.len();

    let (l1, gi) = if mpairs == 0 {
        (g.constant(Tensor::scalar(0.0)), g.constant(Tensor::scalar(0.0)))
    } else {
        let idx: Vec<usize> = matching.pairs.iter().map(|p| p.1).collect();
        let th: Vec<BoxCxCyWh> = matching.pairs.iter().map(|p| gts[p.0].human_box).collect();
        let to: Vec<BoxCxCyWh> = matching.pairs.iter().map(|p| gts[p.0].object_box).collect();
        let ph = g.select_rows(out.human_boxes, &idx)?;
        let po = g.select_rows(out.object_boxes, &idx)?;
        let flat = |b: &[BoxCxCyWh]| Tensor::new(&[b.len(), 4], b.concat());
        let th_t = g.constant(flat(&th)?);
        let to_t = g.constant(flat(&to)?);
        let dh = g.sub(ph, th_t)?;
        let dh = g.abs(dh);
        let dor = g.sub(po, to_t)?;
        let dor = g.abs(dor);
        let sh = g.sum(dh);
        let so = g.sum(dor);
        let s = g.add(sh, so)?;
        let l1 = g.scale(s, 1.0 / mpairs as f64);

        let gh = giou_graph(g, ph, &th)?;
        let go = giou_graph(g, po, &to)?;
        let sgh = g.sum(gh);
        let sgo = g.sum(go);
        let sg = g.add(sgh, sgo)?;
        // Σ (1 − GIoU_H) + (1 − GIoU_O) = 2M − Σ GIoU
        let neg = g.neg(sg);
        let gsum = g.offset(neg, 2.0 * mpairs as f64);
        (l1, g.scale(gsum, 1.0 / mpairs as f64))
    };

    // object classification
    let mut w = vec![0.0; n * (num_obj + 1)];
    let mut wsum = 0.0;
    for q in 0..n {
        let (t, wt) = match matching.gt_for_query(q) {
            Some(gi) => {
                let c = gts[gi].obj_class;
                if c >= num_obj {
                    return Err(Error::ClassRange { index: c, limit: num_obj });
                }
                (c, 1.0)
            }
            None => (num_obj, cfg.bg_weight),
        };
        w[q * (num_obj + 1) + t] = wt;
        wsum += wt;
    }
    let lsm = g.log_softmax(out.obj_logits);
    let wt = g.constant(Tensor::new(&[n, num_obj + 1], w)?);
    let picked = g.mul(lsm, wt)?;
    let s = g.sum(picked);
    let oc = g.scale(s, -1.0 / wsum);

    // interaction classification
    let mut y = vec![0.0; n * num_int];
    for &(gi, q) in &matching.pairs {
        let t = gts[gi].int_class;
        if t >= num_int {
            return Err(Error::ClassRange { index: t, limit: num_int });
        }
        y[q * num_int + t] = 1.0;
    }
    let fl = focal_sum(g, out.int_logits, &y, cfg.focal_alpha, cfg.focal_gamma)?;
    let ic = g.scale(fl, 1.0 / mpairs.max(1) as f64);

    Ok(LossVars { l1, giou: gi, oc, ic })
}

/// Σ over entries of the sigmoid focal loss for logits `x` and 0/1
/// targets `y`:
/// `y·α(1−p)^γ·(−ln p) + (1−y)·(1−α)p^γ·(−ln(1−p))`, `p = σ(x)`.
pub fn focal_sum(g: &mut Graph, x: Var, y: &[f64], alpha: Option<f64>, gamma: f64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (wp, wn) = match alpha {
        Some(a) => (a, 1.0 - a),
        None => (1.0, 1.0),
    };
    let pos_w = g.constant(Tensor::new(&shape, y.iter().map(|t| wp * t).collect())?);
    let neg_w = g.constant(Tensor::new(&shape, y.iter().map(|t| wn * (1.0 - t)).collect())?);
    let nx = g.neg(x);
    // −ln σ(x) = softplus(−x);  −ln(1 − σ(x)) = softplus(x)
    let mut pos = g.softplus(nx);
    let mut neg = g.softplus(x);
    if gamma != 0.0 {
        let q = g.sigmoid(nx);
        let p = g.sigmoid(x);
        let qg = g.powf(q, gamma);
        let pg = g.powf(p, gamma);
        pos = g.mul(qg, pos)?;
        neg = g.mul(pg, neg)?;
    }
    let a = g.mul(pos_w, pos)?;
    let b = g.mul(neg_w, neg)?;
    let ab = g.add(a, b)?;
    Ok(g.sum(ab))
}

/// Matches every layer independently and sums the layer losses.
pub fn total_loss(
    g: &mut Graph,
    layers: &[LayerOutput],
    gts: &[HoiInstance],
    cfg: &LossConfig,
) -> Result<(SetLoss, LossBreakdown)> {
    if layers.is_empty() {
        return Err(Error::Config("loss needs at least one layer".into()));
    }
    let mut parts = Vec::with_capacity(layers.len());
    let mut per_layer = Vec::with_capacity(layers.len());
    for out in layers {
        let preds = out.predictions(g);
        let cost = matching_cost(&preds, gts, cfg)?;
        let m = hungarian(&cost)?;
        let lv = layer_losses(g, out, gts, &m, cfg)?;
        per_layer.push(LossTerms::new(lv.values(g), cfg));
        parts.push(lv);
    }
    let terms = LossVars::combine(g, &parts, None)?;
    let total = terms.weighted_total(g, cfg)?;
    let [l1, giou, oc, ic] = terms.values(g);
    let breakdown = LossBreakdown {
        l1,
        giou,
        oc,
        ic,
        total: g.value(total).data()[0],
        per_layer,
    };
    Ok((SetLoss { terms, total }, breakdown))
}

/// Averages per-image losses over a batch; the total is re-weighted from
/// the averaged terms.
pub fn batch_loss(g: &mut Graph, images: &[SetLoss], cfg: &LossConfig) -> Result<(SetLoss, LossTerms)> {
    if images.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let parts: Vec<LossVars> = images.iter().map(|s| s.terms).collect();
    let terms = LossVars::combine(g, &parts, Some(1.0 / images.len() as f64))?;
    let total = terms.weighted_total(g, cfg)?;
    let [l1, giou, oc, ic] = terms.values(g);
    let t = LossTerms {
        l1,
        giou,
        oc,
        ic,
        total: g.value(total).data()[0],
    };
    Ok((SetLoss { terms, total }, t))
}
