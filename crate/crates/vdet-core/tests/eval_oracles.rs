//! Metric oracles: rasterized IoU, quadratic-reference NMS, exhaustive
//! threshold-enumeration average precision, and hand-computed fixtures.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vdet_core::eval::{
    average_precision, f1, iou, map_at, match_detections, nms, precision_recall, GtBox,
    MatchCounts, MatchLabel,
};
use vdet_core::{Box2, DetectionBox};

// ── IoU ─────────────────────────────────────────────────────────────────────

/// Counting oracle: rasterize both boxes on the integer pixel grid. Exact
/// for integer-aligned boxes.
fn iou_raster(a: &Box2, b: &Box2, extent: usize) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    let inside = |bx: &Box2, x: usize, y: usize| {
        (x as f64) >= bx.left && (x as f64) < bx.right && (y as f64) >= bx.top && (y as f64) < bx.bottom
    };
    for y in 0..extent {
        for x in 0..extent {
            let ia = inside(a, x, y);
            let ib = inside(b, x, y);
            if ia && ib {
                inter += 1;
            }
            if ia || ib {
                union += 1;
            }
        }
    }
    inter as f64 / union as f64
}

#[test]
fn iou_fixed_cases() {
    let a = Box2::new(0.0, 0.0, 2.0, 2.0);
    assert_eq!(iou(&a, &a), 1.0);
    let far = Box2::new(10.0, 10.0, 12.0, 12.0);
    assert_eq!(iou(&a, &far), 0.0);
    let b = Box2::new(1.0, 1.0, 3.0, 3.0);
    let v = iou(&a, &b);
    assert!((v - 1.0 / 7.0).abs() < 1e-15, "{v}");
    assert_eq!(v, iou_raster(&a, &b, 8));
}

proptest! {
    #[test]
    fn iou_symmetric_bounded(ax in 0.0f64..50.0, ay in 0.0f64..50.0,
                             aw in 1.0f64..30.0, ah in 1.0f64..30.0,
                             bx in 0.0f64..50.0, by in 0.0f64..50.0,
                             bw in 1.0f64..30.0, bh in 1.0f64..30.0) {
        let a = Box2::new(ax, ay, ax + aw, ay + ah);
        let b = Box2::new(bx, by, bx + bw, by + bh);
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert_eq!(iou(&a, &a), 1.0);
        if v == 1.0 {
            prop_assert!((a.left - b.left).abs() < 1e-12 && (a.right - b.right).abs() < 1e-12
                && (a.top - b.top).abs() < 1e-12 && (a.bottom - b.bottom).abs() < 1e-12);
        }
    }
}

// ── NMS ─────────────────────────────────────────────────────────────────────

/// Quadratic reference: full pairwise IoU matrix, then a rank-ordered
/// suppression sweep over it.
fn nms_reference(boxes: &[DetectionBox], thr: f64) -> Vec<DetectionBox> {
    let n = boxes.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&boxes[i], &boxes[j]);
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(a.bbox.left.partial_cmp(&b.bbox.left).unwrap())
            .then(a.bbox.top.partial_cmp(&b.bbox.top).unwrap())
            .then(a.bbox.right.partial_cmp(&b.bbox.right).unwrap())
            .then(a.bbox.bottom.partial_cmp(&b.bbox.bottom).unwrap())
            .then(a.class.cmp(&b.class))
    });
    let mut matrix = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            matrix[i][j] = iou(&boxes[i].bbox, &boxes[j].bbox);
        }
    }
    let mut alive = vec![true; n];
    for (pos, &i) in order.iter().enumerate() {
        if !alive[i] {
            continue;
        }
        for &j in &order[pos + 1..] {
            if alive[j] && boxes[j].class == boxes[i].class && matrix[i][j] >= thr {
                alive[j] = false;
            }
        }
    }
    order.into_iter().filter(|&i| alive[i]).map(|i| boxes[i].clone()).collect()
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> Vec<DetectionBox> {
    (0..n)
        .map(|_| {
            let l = rng.gen_range(0..40) as f64;
            let t = rng.gen_range(0..40) as f64;
            let w = rng.gen_range(4..20) as f64;
            let h = rng.gen_range(4..20) as f64;
            // quantized confidences provoke ties
            let confidence = rng.gen_range(1..=20) as f64 / 20.0;
            DetectionBox {
                class: rng.gen_range(0..3),
                confidence,
                bbox: Box2::new(l, t, l + w, t + h),
            }
        })
        .collect()
}

#[test]
fn nms_fixed_cases() {
    let b = Box2::new(0.0, 0.0, 10.0, 10.0);
    let hi = DetectionBox { class: 0, confidence: 0.9, bbox: b };
    let lo = DetectionBox { class: 0, confidence: 0.8, bbox: b };
    let kept = nms(&[lo.clone(), hi.clone()], 0.45);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].confidence, 0.9);

    let other = DetectionBox { class: 0, confidence: 0.5, bbox: Box2::new(50.0, 50.0, 60.0, 60.0) };
    let kept = nms(&[hi.clone(), other.clone()], 0.45);
    assert_eq!(kept.len(), 2);

    // same box, different class: both survive
    let cross = DetectionBox { class: 1, ..lo.clone() };
    assert_eq!(nms(&[hi, cross], 0.45).len(), 2);
}

#[test]
fn nms_matches_quadratic_reference_on_1000_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..1000 {
        let n = rng.gen_range(0..40);
        let boxes = random_instance(&mut rng, n);
        let fast = nms(&boxes, 0.45);
        let slow = nms_reference(&boxes, 0.45);
        assert_eq!(fast, slow, "case {case}");
        assert!(fast.len() <= boxes.len());
    }
}

#[test]
fn nms_is_input_order_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    for _ in 0..50 {
        let mut boxes = random_instance(&mut rng, 25);
        let a = nms(&boxes, 0.45);
        use rand::seq::SliceRandom;
        boxes.shuffle(&mut rng);
        let b = nms(&boxes, 0.45);
        assert_eq!(a, b);
    }
}

// ── matching and scalar metrics ─────────────────────────────────────────────

fn det(class: usize, conf: f64, b: Box2) -> DetectionBox {
    DetectionBox { class, confidence: conf, bbox: b }
}

fn gt(class: usize, b: Box2) -> GtBox {
    GtBox { class, bbox: b, ignore: false }
}

#[test]
fn matching_fixed_cases() {
    let b = Box2::new(0.0, 0.0, 10.0, 10.0);
    let (_, c) = match_detections(&[det(0, 0.9, b)], &[gt(0, b)], 0.5);
    assert_eq!(c, MatchCounts { tp: 1, fp: 0, fn_: 0 });

    let (_, c) = match_detections(&[det(0, 0.9, b)], &[], 0.5);
    assert_eq!(c, MatchCounts { tp: 1 - 1, fp: 1, fn_: 0 });

    // one-to-one: the second detection on the same truth is a false positive
    let (labels, c) = match_detections(&[det(0, 0.9, b), det(0, 0.8, b)], &[gt(0, b)], 0.5);
    assert_eq!(c, MatchCounts { tp: 1, fp: 1, fn_: 0 });
    assert!(matches!(labels[0].1, MatchLabel::Tp(0)));
    assert_eq!(labels[1].1, MatchLabel::Fp);

    // detections over ignore regions disappear from both counts
    let ignore = GtBox { class: 0, bbox: b, ignore: true };
    let (labels, c) = match_detections(&[det(0, 0.9, b)], &[ignore], 0.5);
    assert_eq!(c, MatchCounts::default());
    assert_eq!(labels[0].1, MatchLabel::Ignored);
}

#[test]
fn precision_recall_and_f1_fixed_points() {
    let (p, r) = precision_recall(&MatchCounts { tp: 3, fp: 1, fn_: 1 });
    assert_eq!((p, r), (0.75, 0.75));
    let (p, r) = precision_recall(&MatchCounts::default());
    assert_eq!((p, r), (0.0, 0.0));

    // tabulated operating point on the percent scale
    let f = f1(96.20, 93.70);
    assert!((f - 94.93).abs() < 0.01, "{f}");
    assert_eq!(f1(0.62, 0.62), 0.62);
    assert_eq!(f1(1.0, 0.0), 0.0);
}

// ── average precision ──────────────────────────────────────────────────────

/// Exhaustive oracle: evaluate precision and recall at every distinct
/// confidence cut point, then integrate the envelope over recall, where the
/// envelope value at recall r is the best precision among cuts reaching r.
fn ap_oracle(labeled: &[(f64, bool)], n_gt: usize) -> f64 {
    let mut cuts: Vec<f64> = labeled.iter().map(|l| l.0).collect();
    cuts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    cuts.dedup();
    let mut points: Vec<(f64, f64)> = Vec::new();
    for &t in &cuts {
        let tp = labeled.iter().filter(|l| l.0 >= t && l.1).count();
        let fp = labeled.iter().filter(|l| l.0 >= t && !l.1).count();
        points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for k in 0..points.len() {
        let r = points[k].0;
        let best = points
            .iter()
            .filter(|(rr, _)| *rr >= r)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        ap += (r - prev_r) * best;
        prev_r = r;
    }
    ap
}

#[test]
fn ap_fixed_cases() {
    assert_eq!(average_precision(&[(0.9, true)], 1), Some(1.0));
    assert_eq!(average_precision(&[(0.9, false)], 1), Some(0.0));
    assert_eq!(average_precision(&[], 0), None);
    assert_eq!(average_precision(&[], 3), Some(0.0));
}

#[test]
fn ap_matches_exhaustive_enumeration_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    for case in 0..500 {
        let n = rng.gen_range(1..=10usize);
        let n_gt = rng.gen_range(1..=12usize);
        let labeled: Vec<(f64, bool)> = (0..n)
            .map(|_| (rng.gen_range(1..=8) as f64 / 8.0, rng.gen_bool(0.5)))
            .collect();
        let tp_total = labeled.iter().filter(|l| l.1).count();
        if tp_total > n_gt {
            continue; // infeasible labeling
        }
        let got = average_precision(&labeled, n_gt).unwrap();
        let want = ap_oracle(&labeled, n_gt);
        assert!((got - want).abs() < 1e-12, "case {case}: {got} vs {want}");
    }
}

#[test]
fn ap_depends_only_on_confidence_ranks() {
    let mut rng = ChaCha8Rng::seed_from_u64(92);
    for _ in 0..100 {
        let labeled: Vec<(f64, bool)> =
            (0..8).map(|_| (rng.gen_range(0.01..0.99), rng.gen_bool(0.4))).collect();
        let mapped: Vec<(f64, bool)> =
            labeled.iter().map(|&(c, t)| ((3.0 * c).exp(), t)).collect();
        assert_eq!(average_precision(&labeled, 10), average_precision(&mapped, 10));
    }
}

// ── dataset-level evaluation ────────────────────────────────────────────────

#[test]
fn perfect_detector_scores_full_map() {
    let names = vec!["a".to_string(), "b".to_string()];
    let g1 = Box2::new(0.0, 0.0, 10.0, 10.0);
    let g2 = Box2::new(30.0, 30.0, 50.0, 55.0);
    let gts = vec![vec![gt(0, g1), gt(1, g2)]];
    let dets = vec![vec![det(0, 0.9, g1), det(1, 0.95, g2)]];
    let report = map_at(&dets, &gts, 0.5, &names);
    assert_eq!(report.map50, 1.0);
    assert_eq!((report.precision, report.recall, report.f1), (1.0, 1.0, 1.0));
    assert_eq!(report.f1, f1(report.precision, report.recall));
}

#[test]
fn empty_detections_put_confusion_mass_in_background_row() {
    let names = vec!["a".to_string()];
    let g1 = Box2::new(0.0, 0.0, 10.0, 10.0);
    let report = map_at(&[vec![]], &[vec![gt(0, g1)]], 0.5, &names);
    assert_eq!(report.map50, 0.0);
    assert_eq!(report.confusion[1][0], 1); // background row, class column
    assert_eq!(report.counts.fn_, 1);
}

#[test]
fn hand_built_two_class_scenario_matches_manual_ap() {
    // class 0 has two truths and three detections (TP, FP, TP by rank);
    // class 1 has one truth with one TP
    let names = vec!["a".to_string(), "b".to_string()];
    let g1 = Box2::new(0.0, 0.0, 10.0, 10.0);
    let g2 = Box2::new(20.0, 0.0, 30.0, 10.0);
    let g3 = Box2::new(40.0, 0.0, 50.0, 10.0);
    let gts = vec![vec![gt(0, g1), gt(0, g2), gt(1, g3)]];
    let dets = vec![vec![
        det(0, 0.9, g1),
        det(0, 0.8, Box2::new(60.0, 60.0, 70.0, 70.0)),
        det(0, 0.7, g2),
        det(1, 0.6, g3),
    ]];
    let report = map_at(&dets, &gts, 0.5, &names);
    // class 0 PR points: (0.5, 1), (0.5, 0.5), (1, 2/3); envelope integral
    // = 0.5 * 1 + 0.5 * 2/3 = 5/6
    assert!((report.per_class_ap[0].unwrap() - 5.0 / 6.0).abs() < 1e-12);
    assert_eq!(report.per_class_ap[1], Some(1.0));
    assert!((report.map50 - 11.0 / 12.0).abs() < 1e-12);
}

#[test]
fn map_is_invariant_under_dataset_duplication() {
    let mut rng = ChaCha8Rng::seed_from_u64(93);
    let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
    for _ in 0..20 {
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for _ in 0..4 {
            let mut img_gts = Vec::new();
            for _ in 0..rng.gen_range(0..4) {
                let l = rng.gen_range(0..60) as f64;
                let t = rng.gen_range(0..60) as f64;
                img_gts.push(gt(
                    rng.gen_range(0..3),
                    Box2::new(l, t, l + rng.gen_range(5..15) as f64, t + rng.gen_range(5..15) as f64),
                ));
            }
            let n_dets = rng.gen_range(0..6);
            dets.push(random_instance(&mut rng, n_dets));
            gts.push(img_gts);
        }
        let single = map_at(&dets, &gts, 0.5, &names);
        let mut dets2 = dets.clone();
        dets2.extend(dets.iter().cloned());
        let mut gts2 = gts.clone();
        gts2.extend(gts.iter().cloned());
        let doubled = map_at(&dets2, &gts2, 0.5, &names);
        assert!((single.map50 - doubled.map50).abs() < 1e-12);
    }
}

#[test]
fn classes_without_ground_truth_are_excluded_from_the_mean() {
    let names = vec!["a".to_string(), "b".to_string()];
    let g1 = Box2::new(0.0, 0.0, 10.0, 10.0);
    let report = map_at(&[vec![det(0, 0.9, g1)]], &[vec![gt(0, g1)]], 0.5, &names);
    assert_eq!(report.per_class_ap[1], None);
    assert_eq!(report.map50, 1.0);
}
