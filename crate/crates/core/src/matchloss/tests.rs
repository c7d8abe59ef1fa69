use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::model::{LayerOutput, PredictionSet};
use crate::rng::stream;
use crate::tensor::grad_check;
use crate::{Graph, Tensor, Var};

struct Raw {
    hb: Vec<f64>,
    ob: Vec<f64>,
    oc: Vec<f64>,
    ic: Vec<f64>,
    n: usize,
    num_obj: usize,
    num_int: usize,
}

fn random_raw(seed: u64, n: usize, num_obj: usize, num_int: usize) -> Raw {
    let mut r = stream(seed, 0);
    let mut v = |k: usize, s: f64| (0..k).map(|_| r.gen_range(-s..s)).collect::<Vec<f64>>();
    Raw {
        hb: v(n * 4, 2.0),
        ob: v(n * 4, 2.0),
        oc: v(n * (num_obj + 1), 3.0),
        ic: v(n * num_int, 3.0),
        n,
        num_obj,
        num_int,
    }
}

fn layer(g: &mut Graph, raw: &Raw, rg: bool) -> (LayerOutput, [Var; 4]) {
    let hb = g.leaf(Tensor::new(&[raw.n, 4], raw.hb.clone()).unwrap(), rg);
    let ob = g.leaf(Tensor::new(&[raw.n, 4], raw.ob.clone()).unwrap(), rg);
    let oc = g.leaf(Tensor::new(&[raw.n, raw.num_obj + 1], raw.oc.clone()).unwrap(), rg);
    let ic = g.leaf(Tensor::new(&[raw.n, raw.num_int], raw.ic.clone()).unwrap(), rg);
    let out = LayerOutput {
        human_boxes: g.sigmoid(hb),
        object_boxes: g.sigmoid(ob),
        obj_logits: oc,
        int_logits: ic,
        obj_probs: g.softmax(oc),
        int_probs: g.sigmoid(ic),
    };
    (out, [hb, ob, oc, ic])
}

fn random_gts(seed: u64, count: usize, num_obj: usize, num_int: usize) -> Vec<HoiInstance> {
    let mut r = stream(seed, 1);
    (0..count)
        .map(|_| {
            let mut b = || [r.gen_range(0.2..0.8), r.gen_range(0.2..0.8), r.gen_range(0.05..0.4), r.gen_range(0.05..0.4)];
            let (human_box, object_box) = (b(), b());
            HoiInstance {
                human_box,
                object_box,
                obj_class: r.gen_range(0..num_obj),
                int_class: r.gen_range(0..num_int),
            }
        })
        .collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Plain-arithmetic loss terms of one layer under `m`.
fn oracle(raw: &Raw, gts: &[HoiInstance], m: &MatchResult, cfg: &LossConfig) -> [f64; 4] {
    let box_at = |v: &[f64], q: usize| [0, 1, 2, 3].map(|k| sig(v[q * 4 + k]));
    let mp = m.pairs.len() as f64;
    let (mut l1, mut gi) = (0.0, 0.0);
    for &(g, q) in &m.pairs {
        let (h, o) = (box_at(&raw.hb, q), box_at(&raw.ob, q));
        for k in 0..4 {
            l1 += (h[k] - gts[g].human_box[k]).abs() + (o[k] - gts[g].object_box[k]).abs();
        }
        gi += (1.0 - giou(&h, &gts[g].human_box).unwrap()) + (1.0 - giou(&o, &gts[g].object_box).unwrap());
    }
    if mp > 0.0 {
        l1 /= mp;
        gi /= mp;
    }
    let c = raw.num_obj + 1;
    let (mut num, mut den) = (0.0, 0.0);
    for q in 0..raw.n {
        let row = &raw.oc[q * c..(q + 1) * c];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        let (t, w) = match m.gt_for_query(q) {
            Some(g) => (gts[g].obj_class, 1.0),
            None => (raw.num_obj, cfg.bg_weight),
        };
        num += w * -(row[t].exp() / z).ln();
        den += w;
    }
    let a = cfg.focal_alpha.unwrap_or(0.5);
    let (wp, wn) = if cfg.focal_alpha.is_some() { (a, 1.0 - a) } else { (1.0, 1.0) };
    let mut ic = 0.0;
    for q in 0..raw.n {
        for k in 0..raw.num_int {
            let p = sig(raw.ic[q * raw.num_int + k]);
            let y = m.gt_for_query(q).map_or(false, |g| gts[g].int_class == k);
            ic += if y {
                wp * (1.0 - p).powf(cfg.focal_gamma) * -p.ln()
            } else {
                wn * p.powf(cfg.focal_gamma) * -(1.0 - p).ln()
            };
        }
    }
    [l1, gi, num / den, ic / mp.max(1.0)]
}

fn perms(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in perms(n, k - 1) {
        for j in 0..n {
            if !p.contains(&j) {
                let mut q = p.clone();
                q.push(j);
                out.push(q);
            }
        }
    }
    out
}

#[test]
fn hungarian_equals_brute_force_on_random_4x6() {
    let all = perms(6, 4);
    for case in 0..500u64 {
        let mut r = stream(case, 42);
        let data: Vec<f64> = (0..24).map(|_| r.gen_range(0.0..10.0)).collect();
        let c = CostMatrix::new(4, 6, data).unwrap();
        let m = hungarian(&c).unwrap();
        let best = all.iter().map(|p| c.assignment_cost(p)).fold(f64::INFINITY, f64::min);
        assert!((m.total_cost - best).abs() < 1e-9, "case {case}: {} vs {best}", m.total_cost);
        let q: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
        let mut uniq = q.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 4);
        assert_eq!(m.unmatched_queries.len(), 2);
    }
}

#[test]
fn hungarian_tie_break_is_lexicographic_on_integer_costs() {
    for case in 0..300u64 {
        let mut r = stream(case, 7);
        let g = r.gen_range(1..=4);
        let n = r.gen_range(g..=6);
        let data: Vec<f64> = (0..g * n).map(|_| r.gen_range(0..3) as f64).collect();
        let c = CostMatrix::new(g, n, data).unwrap();
        let m = hungarian(&c).unwrap();
        let want = perms(n, g)
            .into_iter()
            .min_by(|a, b| {
                c.assignment_cost(a)
                    .partial_cmp(&c.assignment_cost(b))
                    .unwrap()
                    .then_with(|| a.cmp(b))
            })
            .unwrap();
        let got: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
        assert_eq!(got, want, "case {case}");
    }
}

proptest! {
    #[test]
    fn hungarian_is_optimal_up_to_7(g in 0usize..=4, extra in 0usize..=3, seed in any::<u64>()) {
        let n = (g + extra).max(1);
        let mut r = stream(seed, 3);
        let data: Vec<f64> = (0..g * n).map(|_| r.gen_range(-5.0..5.0)).collect();
        let c = CostMatrix::new(g, n, data).unwrap();
        let m = hungarian(&c).unwrap();
        for p in perms(n, g) {
            prop_assert!(m.total_cost <= c.assignment_cost(&p) + 1e-9);
        }
        prop_assert_eq!(m.pairs.len(), g);
    }
}

#[test]
fn graph_giou_matches_plain_giou() {
    let mut r = stream(1, 1);
    let a: Vec<[f64; 4]> = (0..20)
        .map(|_| [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.01..0.6), r.gen_range(0.01..0.6)])
        .collect();
    let b: Vec<[f64; 4]> = (0..20)
        .map(|_| [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.01..0.6), r.gen_range(0.01..0.6)])
        .collect();
    let mut g = Graph::new();
    let p = g.constant(Tensor::new(&[20, 4], a.concat()).unwrap());
    let out = giou_graph(&mut g, p, &b).unwrap();
    for k in 0..20 {
        let want = giou(&a[k], &b[k]).unwrap();
        assert!((g.value(out).data()[k] - want).abs() < 1e-12);
    }
}

fn preds_from(hb: Vec<[f64; 4]>, ob: Vec<[f64; 4]>, po: Vec<Vec<f64>>, pi: Vec<Vec<f64>>) -> PredictionSet {
    PredictionSet {
        human_boxes: hb,
        object_boxes: ob,
        obj_probs: po,
        int_probs: pi,
    }
}

#[test]
fn exact_prediction_costs_zero() {
    let gt = HoiInstance {
        human_box: [0.3, 0.4, 0.2, 0.3],
        object_box: [0.6, 0.5, 0.1, 0.1],
        obj_class: 1,
        int_class: 0,
    };
    let p = preds_from(
        vec![gt.human_box, [0.5; 4]],
        vec![gt.object_box, [0.5; 4]],
        vec![vec![0.0, 1.0, 0.0], vec![0.2, 0.3, 0.5]],
        vec![vec![1.0, 0.0], vec![0.5, 0.5]],
    );
    let c = matching_cost(&p, &[gt], &LossConfig::default()).unwrap();
    assert!(c.get(0, 0).abs() < 1e-15);
    assert!(c.get(0, 1) > 0.0);
    let bad = HoiInstance { obj_class: 2, ..gt };
    assert!(matches!(
        matching_cost(&p, &[bad], &LossConfig::default()),
        Err(crate::Error::ClassRange { index: 2, limit: 2 })
    ));
}

#[test]
fn cost_matrix_two_by_three_by_hand() {
    // Boxes chosen so every GIoU is a simple fraction.
    let sq = |cx: f64, cy: f64| [cx, cy, 0.2, 0.2];
    let gts = [
        HoiInstance { human_box: sq(0.5, 0.5), object_box: sq(0.5, 0.5), obj_class: 0, int_class: 1 },
        HoiInstance { human_box: sq(0.3, 0.5), object_box: sq(0.7, 0.5), obj_class: 1, int_class: 0 },
    ];
    let p = preds_from(
        vec![sq(0.5, 0.5), sq(0.3, 0.5), sq(0.4, 0.5)],
        vec![sq(0.5, 0.5), sq(0.7, 0.5), sq(0.6, 0.5)],
        vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.3, 0.3, 0.4]],
        vec![vec![0.1, 0.9], vec![0.6, 0.4], vec![0.5, 0.5]],
    );
    let c = matching_cost(&p, &gts, &LossConfig::default()).unwrap();
    // Overlapping 0.2 squares offset by 0.1 along x: I = 0.02, U = 0.06,
    // enclosure 0.3×0.2 = 0.06 → GIoU = 1/3. Offset 0.2: touching, GIoU 0.
    let third = 1.0 / 3.0;
    let want = [
        // gt 0 vs q0: exact boxes.
        2.5 * 0.0 + (2.0 - 1.0 - 1.0) + (1.0 - 0.7) + (1.0 - 0.9),
        // gt 0 vs q1: h offset 0.2 (l1 0.2, giou 0), o offset 0.2.
        2.5 * 0.4 + (2.0 - 0.0 - 0.0) + (1.0 - 0.1) + (1.0 - 0.4),
        // gt 0 vs q2: offsets 0.1 each.
        2.5 * 0.2 + (2.0 - third - third) + (1.0 - 0.3) + (1.0 - 0.5),
        // gt 1 vs q0: offsets 0.2 each.
        2.5 * 0.4 + 2.0 + (1.0 - 0.2) + (1.0 - 0.1),
        // gt 1 vs q1: exact.
        0.0 + 0.0 + (1.0 - 0.8) + (1.0 - 0.6),
        // gt 1 vs q2: offsets 0.1 each.
        2.5 * 0.2 + (2.0 - 2.0 * third) + (1.0 - 0.3) + (1.0 - 0.5),
    ];
    for (k, w) in want.iter().enumerate() {
        let got = c.get(k / 3, k % 3);
        assert!((got - w).abs() < 1e-12, "entry {k}: {got} vs {w}");
    }
    let m = hungarian(&c).unwrap();
    assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
}

#[test]
fn layer_losses_match_plain_oracle() {
    for seed in 0..20u64 {
        let raw = random_raw(seed, 6, 3, 4);
        let gts = random_gts(seed, (seed % 4) as usize, 3, 4);
        for cfg in [
            LossConfig::default(),
            LossConfig { focal_alpha: None, focal_gamma: 0.0, ..LossConfig::default() },
            LossConfig { focal_gamma: 1.5, bg_weight: 0.3, ..LossConfig::default() },
        ] {
            let mut g = Graph::new();
            let (out, _) = layer(&mut g, &raw, false);
            let preds = out.predictions(&g);
            let m = hungarian(&matching_cost(&preds, &gts, &cfg).unwrap()).unwrap();
            let got = layer_losses(&mut g, &out, &gts, &m, &cfg).unwrap().values(&g);
            let want = oracle(&raw, &gts, &m, &cfg);
            for k in 0..4 {
                assert!((got[k] - want[k]).abs() < 1e-10, "seed {seed} term {k}: {} vs {}", got[k], want[k]);
            }
        }
    }
}

#[test]
fn near_perfect_predictions_have_tiny_loss() {
    let gt = HoiInstance {
        human_box: [0.3, 0.4, 0.2, 0.3],
        object_box: [0.6, 0.5, 0.1, 0.1],
        obj_class: 1,
        int_class: 2,
    };
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let q = 1.0 - 1e-8;
    let big = logit(q);
    let mut g = Graph::new();
    let hb = g.constant(Tensor::new(&[1, 4], gt.human_box.to_vec()).unwrap());
    let ob = g.constant(Tensor::new(&[1, 4], gt.object_box.to_vec()).unwrap());
    // Two other classes at logit 0 and the target at ln(2q/(1−q)) gives p = q.
    let oc = g.constant(Tensor::new(&[1, 3], vec![0.0, (2.0 * q / (1.0 - q)).ln(), 0.0]).unwrap());
    let ic = g.constant(Tensor::new(&[1, 3], vec![-big, -big, big]).unwrap());
    let out = LayerOutput {
        human_boxes: hb,
        object_boxes: ob,
        obj_logits: oc,
        int_logits: ic,
        obj_probs: g.softmax(oc),
        int_probs: g.sigmoid(ic),
    };
    let m = MatchResult { pairs: vec![(0, 0)], unmatched_queries: vec![], total_cost: 0.0 };
    let [l1, gi, o, i] = layer_losses(&mut g, &out, &[gt], &m, &LossConfig::default()).unwrap().values(&g);
    assert_eq!(l1, 0.0);
    assert!(gi.abs() < 1e-15);
    assert!(o < 1e-6 && o >= 0.0, "{o}");
    assert!(i < 1e-6 && i >= 0.0, "{i}");
}

#[test]
fn empty_ground_truth_reduces_to_background_terms() {
    let raw = random_raw(3, 4, 2, 3);
    let cfg = LossConfig::default();
    let mut g = Graph::new();
    let (out, _) = layer(&mut g, &raw, false);
    let m = hungarian(&CostMatrix::new(0, 4, vec![]).unwrap()).unwrap();
    let [l1, gi, oc, ic] = layer_losses(&mut g, &out, &[], &m, &cfg).unwrap().values(&g);
    assert_eq!((l1, gi), (0.0, 0.0));
    let want = oracle(&raw, &[], &m, &cfg);
    assert!((oc - want[2]).abs() < 1e-12 && (ic - want[3]).abs() < 1e-12);
    assert!(oc > 0.0 && ic > 0.0);
}

#[test]
fn focal_single_pair_closed_form() {
    // One query, three interaction classes all at p = 0.5, target class 1.
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3]));
    let y = [0.0, 1.0, 0.0];
    let f = focal_sum(&mut g, x, &y, Some(0.25), 2.0).unwrap();
    let got = g.value(f).data()[0];
    let ln2 = 2f64.ln();
    let want = 0.25 * 0.25 * ln2 + 2.0 * 0.75 * 0.25 * ln2;
    assert!((got - want).abs() < 1e-15, "{got} vs {want}");
}

proptest! {
    #[test]
    fn focal_without_shaping_is_bce(xs in proptest::collection::vec(-8.0f64..8.0, 1..12), bits in any::<u16>()) {
        let n = xs.len();
        let y: Vec<f64> = (0..n).map(|k| ((bits >> (k % 16)) & 1) as f64).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, n], xs.clone()).unwrap());
        let f = focal_sum(&mut g, x, &y, None, 0.0).unwrap();
        let got = g.value(f).data()[0];
        let want: f64 = xs.iter().zip(&y).map(|(&x, &t)| {
            let p = sig(x);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        }).sum();
        prop_assert!((got - want).abs() < 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn losses_are_invariant_to_gt_order_and_nonnegative(seed in any::<u64>(), count in 0usize..4) {
        let raw = random_raw(seed, 5, 3, 4);
        let gts = random_gts(seed, count, 3, 4);
        let cfg = LossConfig::default();
        let eval = |gts: &[HoiInstance]| {
            let mut g = Graph::new();
            let (out, _) = layer(&mut g, &raw, false);
            let (_, b) = total_loss(&mut g, &[out], gts, &cfg).unwrap();
            b
        };
        let a = eval(&gts);
        let mut rev = gts.clone();
        rev.reverse();
        let b = eval(&rev);
        for (x, y) in [(a.l1, b.l1), (a.giou, b.giou), (a.oc, b.oc), (a.ic, b.ic)] {
            prop_assert!((x - y).abs() < 1e-9);
            prop_assert!(x >= 0.0);
        }
    }

    #[test]
    fn total_is_exact_weighted_sum(seed in any::<u64>(), count in 0usize..4, layers in 1usize..4) {
        let cfg = LossConfig::default();
        let gts = random_gts(seed, count, 3, 4);
        let mut g = Graph::new();
        let outs: Vec<LayerOutput> = (0..layers)
            .map(|l| layer(&mut g, &random_raw(seed ^ l as u64, 5, 3, 4), false).0)
            .collect();
        let (_, b) = total_loss(&mut g, &outs, &gts, &cfg).unwrap();
        prop_assert_eq!(b.total, 2.5 * b.l1 + 1.0 * b.giou + 1.0 * b.oc + 1.0 * b.ic);
        prop_assert_eq!(b.per_layer.len(), layers);
        for t in &b.per_layer {
            prop_assert_eq!(t.total, cfg.weigh(t.l1, t.giou, t.oc, t.ic));
        }
    }
}

#[test]
fn single_layer_and_duplicated_layers() {
    let cfg = LossConfig::default();
    let raw = random_raw(8, 6, 3, 4);
    let gts = random_gts(8, 3, 3, 4);
    let mut g = Graph::new();
    let (out, _) = layer(&mut g, &raw, false);
    let m = hungarian(&matching_cost(&out.predictions(&g), &gts, &cfg).unwrap()).unwrap();
    let one = layer_losses(&mut g, &out, &gts, &m, &cfg).unwrap().values(&g);
    let (_, single) = total_loss(&mut g, &[out], &gts, &cfg).unwrap();
    assert_eq!([single.l1, single.giou, single.oc, single.ic], one);
    let (_, double) = total_loss(&mut g, &[out, out], &gts, &cfg).unwrap();
    assert_eq!(double.total, 2.0 * single.total);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let raw = random_raw(4, 5, 3, 4);
    let gts = random_gts(4, 2, 3, 4);
    let cfg = LossConfig::default();
    let inputs = vec![
        ("hb".to_string(), Tensor::new(&[5, 4], raw.hb.clone()).unwrap(), true),
        ("ob".to_string(), Tensor::new(&[5, 4], raw.ob.clone()).unwrap(), true),
        ("oc".to_string(), Tensor::new(&[5, 4], raw.oc.clone()).unwrap(), true),
        ("ic".to_string(), Tensor::new(&[5, 4], raw.ic.clone()).unwrap(), true),
    ];
    let report = grad_check::<_, crate::Error>(
        &inputs,
        |g, v| {
            let out = LayerOutput {
                human_boxes: g.sigmoid(v[0]),
                object_boxes: g.sigmoid(v[1]),
                obj_logits: v[2],
                int_logits: v[3],
                obj_probs: g.softmax(v[2]),
                int_probs: g.sigmoid(v[3]),
            };
            let (l, _) = total_loss(g, &[out], &gts, &cfg)?;
            Ok(l.total)
        },
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn batch_mean_averages_terms() {
    let cfg = LossConfig::default();
    let mut g = Graph::new();
    let mut parts = Vec::new();
    let mut sums = [0.0; 4];
    for seed in 0..3u64 {
        let (out, _) = layer(&mut g, &random_raw(seed, 4, 3, 4), false);
        let (l, b) = total_loss(&mut g, &[out], &random_gts(seed, 2, 3, 4), &cfg).unwrap();
        for (s, v) in sums.iter_mut().zip([b.l1, b.giou, b.oc, b.ic]) {
            *s += v;
        }
        parts.push(l);
    }
    let (_, t) = batch_loss(&mut g, &parts, &cfg).unwrap();
    for (got, s) in [t.l1, t.giou, t.oc, t.ic].iter().zip(sums) {
        assert!((got - s / 3.0).abs() < 1e-12);
    }
    assert_eq!(t.total, cfg.weigh(t.l1, t.giou, t.oc, t.ic));
}

#[test]
fn instance_validation() {
    let ok = HoiInstance { human_box: [0.5; 4], object_box: [0.5; 4], obj_class: 0, int_class: 0 };
    ok.validate(1, 1).unwrap();
    assert!(HoiInstance { obj_class: 1, ..ok }.validate(1, 1).is_err());
    assert!(HoiInstance { human_box: [0.5, 0.5, 0.0, 0.1], ..ok }.validate(1, 1).is_err());
}
