//! Top-k decoding of interaction triplets and mean average precision over
//! (object, interaction) classes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::matchloss::{iou, HoiInstance};
use crate::model::PredictionSet;
use crate::{Error, Result};

pub const IOU_THRESHOLD: f64 = 0.5;
/// Classes with fewer training instances than this form the rare split.
pub const RARE_BELOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstance {
    pub instance: HoiInstance,
    /// `p^O[j'] · p^I[t]` with `j'` the best real object class.
    pub score: f64,
    /// Source query.
    pub query: usize,
}

/// The `k` best `(query, interaction)` pairs by score. Ties go to the
/// lower query, then the lower interaction.
pub fn decode_topk(preds: &PredictionSet, k: usize) -> Vec<ScoredInstance> {
    let num_obj = preds.num_obj();
    let mut all = Vec::with_capacity(preds.len() * preds.num_int());
    for i in 0..preds.len() {
        let po = &preds.obj_probs[i][..num_obj];
        let mut j = 0;
        for (c, &p) in po.iter().enumerate() {
            if p > po[j] {
                j = c;
            }
        }
        for (t, &pi) in preds.int_probs[i].iter().enumerate() {
            all.push(ScoredInstance {
                instance: HoiInstance {
                    human_box: preds.human_boxes[i],
                    object_box: preds.object_boxes[i],
                    obj_class: j,
                    int_class: t,
                },
                score: po[j] * pi,
                query: i,
            });
        }
    }
    all.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.query.cmp(&b.query))
            .then(a.instance.int_class.cmp(&b.instance.int_class))
    });
    all.truncate(k);
    all
}

/// A detection tagged with the image it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub det: ScoredInstance,
}

fn is_match(d: &HoiInstance, g: &HoiInstance) -> bool {
    d.obj_class == g.obj_class
        && d.int_class == g.int_class
        && iou(&d.human_box, &g.human_box).unwrap_or(0.0) >= IOU_THRESHOLD
        && iou(&d.object_box, &g.object_box).unwrap_or(0.0) >= IOU_THRESHOLD
}

/// Average precision of `dets` against per-image ground truths `gts`.
///
/// Detections are visited by descending score (ties: image, query,
/// interaction); each claims the first unclaimed matching gt of its image.
/// The area under the precision-recall curve uses all-points
/// interpolation. Returns 0 when there is no ground truth.
pub fn ap_per_class(dets: &[Detection], gts: &[Vec<HoiInstance>]) -> f64 {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| {
        b.det
            .score
            .total_cmp(&a.det.score)
            .then(a.image.cmp(&b.image))
            .then(a.det.query.cmp(&b.det.query))
            .then(a.det.instance.int_class.cmp(&b.det.instance.int_class))
    });
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(order.len());
    for (k, d) in order.iter().enumerate() {
        let hit = gts.get(d.image).and_then(|img| {
            (0..img.len()).find(|&j| !claimed[d.image][j] && is_match(&d.det.instance, &img[j]))
        });
        if let Some(j) = hit {
            claimed[d.image][j] = true;
            tp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // Precision envelope from the right, then sum over recall steps.
    let mut ap = 0.0;
    let mut best = 0.0f64;
    let mut envelope = vec![0.0; curve.len()];
    for k in (0..curve.len()).rev() {
        best = best.max(curve[k].1);
        envelope[k] = best;
    }
    let mut prev_recall = 0.0;
    for (k, &(r, _)) in curve.iter().enumerate() {
        if r > prev_recall {
            ap += (r - prev_recall) * envelope[k];
            prev_recall = r;
        }
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub obj: usize,
    pub int: usize,
    pub ap: f64,
    pub n_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_full: f64,
    /// `None` when no evaluated class is rare.
    pub map_rare: Option<f64>,
    pub per_class: Vec<ClassAp>,
}

/// Training instances per `(obj, int)` class.
pub fn class_census<'a>(gts: impl IntoIterator<Item = &'a HoiInstance>) -> BTreeMap<(usize, usize), usize> {
    let mut m = BTreeMap::new();
    for g in gts {
        *m.entry((g.obj_class, g.int_class)).or_insert(0) += 1;
    }
    m
}

/// Scores detections of every image against its ground truths. Classes
/// are the `(obj, int)` pairs present in `gts`; a class is rare when
/// `train_census` holds fewer than [`RARE_BELOW`] instances of it.
pub fn evaluate_detections(
    dets: &[Vec<ScoredInstance>],
    gts: &[Vec<HoiInstance>],
    train_census: &BTreeMap<(usize, usize), usize>,
) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(Error::Eval("empty dataset".into()));
    }
    if dets.len() != gts.len() {
        return Err(Error::Eval(format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    let classes = class_census(gts.iter().flatten());
    if classes.is_empty() {
        return Err(Error::Eval("dataset has no ground-truth interactions".into()));
    }
    let mut per_class = Vec::with_capacity(classes.len());
    let (mut full, mut rare) = (Vec::new(), Vec::new());
    for (&(obj, int), &n_gt) in &classes {
        let of = |i: &HoiInstance| i.obj_class == obj && i.int_class == int;
        let cd: Vec<Detection> = dets
            .iter()
            .enumerate()
            .flat_map(|(image, ds)| ds.iter().filter(|d| of(&d.instance)).map(move |&det| Detection { image, det }))
            .collect();
        let cg: Vec<Vec<HoiInstance>> = gts.iter().map(|g| g.iter().filter(|i| of(i)).copied().collect()).collect();
        let ap = ap_per_class(&cd, &cg);
        full.push(ap);
        if train_census.get(&(obj, int)).copied().unwrap_or(0) < RARE_BELOW {
            rare.push(ap);
        }
        per_class.push(ClassAp { obj, int, ap, n_gt });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(EvalReport {
        map_full: mean(&full),
        map_rare: (!rare.is_empty()).then(|| mean(&rare)),
        per_class,
    })
}

/// Decodes `k` detections per image and evaluates them.
pub fn evaluate(
    preds: &[PredictionSet],
    gts: &[Vec<HoiInstance>],
    train_census: &BTreeMap<(usize, usize), usize>,
    k: usize,
) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::Eval("k must be at least 1".into()));
    }
    let dets: Vec<Vec<ScoredInstance>> = preds.iter().map(|p| decode_topk(p, k)).collect();
    evaluate_detections(&dets, gts, train_census)
}
