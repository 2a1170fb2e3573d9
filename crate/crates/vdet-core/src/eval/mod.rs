//! Detection metrics: IoU, greedy NMS, confidence-ranked matching, average
//! precision over the monotone precision-recall envelope, and report
//! formatting.

use crate::boxes::{Box2, DetectionBox};
use std::cmp::Ordering;
use std::fmt::Write as _;

pub mod complexity;
pub use complexity::{count_params_flops, ComplexityReport};

/// Intersection area over union area, in `[0, 1]`.
pub fn iou(a: &Box2, b: &Box2) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Total order used wherever detections are ranked: confidence descending,
/// then left coordinate and the remaining fields as the stable tie-break.
fn rank(a: &DetectionBox, b: &DetectionBox) -> Ordering {
    b.confidence
        .partial_cmp(&a.confidence)
        .unwrap_or(Ordering::Equal)
        .then(a.bbox.left.partial_cmp(&b.bbox.left).unwrap_or(Ordering::Equal))
        .then(a.bbox.top.partial_cmp(&b.bbox.top).unwrap_or(Ordering::Equal))
        .then(a.bbox.right.partial_cmp(&b.bbox.right).unwrap_or(Ordering::Equal))
        .then(a.bbox.bottom.partial_cmp(&b.bbox.bottom).unwrap_or(Ordering::Equal))
        .then(a.class.cmp(&b.class))
}

/// Greedy per-class suppression: a box survives iff its overlap with every
/// higher-ranked surviving box of the same class stays below the threshold.
pub fn nms(boxes: &[DetectionBox], iou_threshold: f64) -> Vec<DetectionBox> {
    let mut sorted: Vec<DetectionBox> = boxes.to_vec();
    sorted.sort_by(rank);
    let mut kept: Vec<DetectionBox> = Vec::new();
    for b in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.class == b.class && iou(&k.bbox, &b.bbox) >= iou_threshold);
        if !suppressed {
            kept.push(b);
        }
    }
    kept
}

/// Ground-truth box for evaluation; ignore regions absorb detections
/// without contributing to any count.
#[derive(Clone, Debug)]
pub struct GtBox {
    pub class: usize,
    pub bbox: Box2,
    pub ignore: bool,
}

/// Per-detection outcome from matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchLabel {
    /// Matched the ground truth with this index.
    Tp(usize),
    Fp,
    /// Overlapped an ignore region; dropped from every count.
    Ignored,
}

/// Aggregate true/false positive and false negative counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Greedy confidence-ranked matching: every detection takes the highest-IoU
/// unmatched same-class ground truth at or above the threshold, otherwise it
/// is a false positive unless it overlaps an ignore region.
pub fn match_detections(
    dets: &[DetectionBox],
    gts: &[GtBox],
    iou_threshold: f64,
) -> (Vec<(DetectionBox, MatchLabel)>, MatchCounts) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| rank(&dets[i], &dets[j]));
    let mut gt_taken = vec![false; gts.len()];
    let mut labeled = Vec::with_capacity(dets.len());
    let mut counts = MatchCounts::default();

    for &di in &order {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if g.ignore || gt_taken[gi] || g.class != d.class {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= iou_threshold && best.map(|(_, bv)| v > bv).unwrap_or(true) {
                best = Some((gi, v));
            }
        }
        let label = match best {
            Some((gi, _)) => {
                gt_taken[gi] = true;
                counts.tp += 1;
                MatchLabel::Tp(gi)
            }
            None => {
                let on_ignore = gts
                    .iter()
                    .any(|g| g.ignore && iou(&d.bbox, &g.bbox) >= iou_threshold);
                if on_ignore {
                    MatchLabel::Ignored
                } else {
                    counts.fp += 1;
                    MatchLabel::Fp
                }
            }
        };
        labeled.push((d.clone(), label));
    }
    counts.fn_ = gts
        .iter()
        .enumerate()
        .filter(|(gi, g)| !g.ignore && !gt_taken[*gi])
        .count();
    (labeled, counts)
}

/// `TP/(TP+FP)` and `TP/(TP+FN)`, with `0/0` defined as 0.
pub fn precision_recall(counts: &MatchCounts) -> (f64, f64) {
    let p = if counts.tp + counts.fp == 0 {
        0.0
    } else {
        counts.tp as f64 / (counts.tp + counts.fp) as f64
    };
    let r = if counts.tp + counts.fn_ == 0 {
        0.0
    } else {
        counts.tp as f64 / (counts.tp + counts.fn_) as f64
    };
    (p, r)
}

/// Harmonic mean of precision and recall; 0 when both vanish.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Average precision from `(confidence, is_tp)` labels: sweep the ranked
/// detections (ties grouped), build the precision-recall curve, take the
/// monotone envelope, and integrate it over recall.
///
/// Returns `None` when the class has no ground truth.
pub fn average_precision(labeled: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut sorted: Vec<(f64, bool)> = labeled.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));

    // PR points at distinct confidence cut points
    let mut points: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let conf = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == conf {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }

    // monotone envelope from the high-recall end
    let mut env = points.clone();
    for k in (0..env.len().saturating_sub(1)).rev() {
        env[k].1 = env[k].1.max(env[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for &(r, p) in &env {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    Some(ap)
}

/// Operating point used for the reported precision/recall/F1 and the
/// confusion matrix.
pub const REPORT_CONF: f64 = 0.25;

/// Full evaluation outcome.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// Per-class average precision; `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    pub per_class_gt: Vec<usize>,
    pub map50: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: MatchCounts,
    /// `(C+1) x (C+1)`; row = predicted class, column = true class, last
    /// index = background.
    pub confusion: Vec<Vec<usize>>,
    pub iou_threshold: f64,
}

/// Evaluates detections against ground truth over a whole dataset.
///
/// AP pools ranked detections per class across images; the reported
/// precision/recall/F1 and confusion matrix use the fixed operating point
/// [`REPORT_CONF`].
pub fn map_at(
    dets_per_image: &[Vec<DetectionBox>],
    gts_per_image: &[Vec<GtBox>],
    iou_threshold: f64,
    class_names: &[String],
) -> EvalReport {
    assert_eq!(dets_per_image.len(), gts_per_image.len(), "image count mismatch");
    let ncls = class_names.len();
    let mut per_class_labels: Vec<Vec<(f64, bool)>> = vec![Vec::new(); ncls];
    let mut per_class_gt = vec![0usize; ncls];
    let mut op_counts = MatchCounts::default();
    let mut confusion = vec![vec![0usize; ncls + 1]; ncls + 1];

    for (dets, gts) in dets_per_image.iter().zip(gts_per_image) {
        for g in gts {
            if !g.ignore {
                per_class_gt[g.class] += 1;
            }
        }
        let (labeled, _) = match_detections(dets, gts, iou_threshold);
        for (d, label) in &labeled {
            match label {
                MatchLabel::Tp(_) => per_class_labels[d.class].push((d.confidence, true)),
                MatchLabel::Fp => per_class_labels[d.class].push((d.confidence, false)),
                MatchLabel::Ignored => {}
            }
        }

        // operating point: re-match on the thresholded subset
        let op_dets: Vec<DetectionBox> =
            dets.iter().filter(|d| d.confidence >= REPORT_CONF).cloned().collect();
        let (op_labeled, c) = match_detections(&op_dets, gts, iou_threshold);
        op_counts.tp += c.tp;
        op_counts.fp += c.fp;
        op_counts.fn_ += c.fn_;

        // confusion matrix: class-agnostic best-IoU pairing on the same subset
        let mut gt_taken = vec![false; gts.len()];
        for (d, label) in &op_labeled {
            if matches!(label, MatchLabel::Ignored) {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if g.ignore || gt_taken[gi] {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v >= iou_threshold && best.map(|(_, bv)| v > bv).unwrap_or(true) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, _)) => {
                    gt_taken[gi] = true;
                    confusion[d.class][gts[gi].class] += 1;
                }
                None => confusion[d.class][ncls] += 1,
            }
        }
        for (gi, g) in gts.iter().enumerate() {
            if !g.ignore && !gt_taken[gi] {
                confusion[ncls][g.class] += 1;
            }
        }
    }

    let per_class_ap: Vec<Option<f64>> = per_class_labels
        .iter()
        .zip(&per_class_gt)
        .map(|(labels, &n)| average_precision(labels, n))
        .collect();
    let scored: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map50 = if scored.is_empty() { 0.0 } else { scored.iter().sum::<f64>() / scored.len() as f64 };
    let (precision, recall) = precision_recall(&op_counts);
    EvalReport {
        class_names: class_names.to_vec(),
        per_class_ap,
        per_class_gt,
        map50,
        precision,
        recall,
        f1: f1(precision, recall),
        counts: op_counts,
        confusion,
        iou_threshold,
    }
}

impl EvalReport {
    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "evaluation (IoU {:.2}, operating conf {:.2})", self.iou_threshold, REPORT_CONF);
        let _ = writeln!(out, "  {:<12} {:>8} {:>10}", "class", "gt", "ap");
        for (i, name) in self.class_names.iter().enumerate() {
            match self.per_class_ap[i] {
                Some(ap) => {
                    let _ = writeln!(out, "  {:<12} {:>8} {:>10.4}", name, self.per_class_gt[i], ap);
                }
                None => {
                    let _ = writeln!(out, "  {:<12} {:>8} {:>10}", name, self.per_class_gt[i], "n/a");
                }
            }
        }
        let _ = writeln!(out, "  map50     = {:.4}", self.map50);
        let _ = writeln!(out, "  precision = {:.4}", self.precision);
        let _ = writeln!(out, "  recall    = {:.4}", self.recall);
        let _ = writeln!(out, "  f1        = {:.4}", self.f1);
        let _ = writeln!(
            out,
            "  tp={} fp={} fn={}",
            self.counts.tp, self.counts.fp, self.counts.fn_
        );
        let _ = writeln!(out, "  confusion (rows predicted, cols true, last = background):");
        let mut header = String::from("              ");
        for name in self.class_names.iter().map(|s| s.as_str()).chain(["bg"]) {
            let _ = write!(header, "{name:>8}");
        }
        let _ = writeln!(out, "  {header}");
        for (i, row) in self.confusion.iter().enumerate() {
            let label = if i < self.class_names.len() { self.class_names[i].as_str() } else { "bg" };
            let mut line = format!("    {label:<10}");
            for v in row {
                let _ = write!(line, "{v:>8}");
            }
            let _ = writeln!(out, "  {line}");
        }
        out
    }

    /// Machine-readable `key=value` block.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "iou_threshold={}", self.iou_threshold);
        let _ = writeln!(out, "report_conf={REPORT_CONF}");
        let _ = writeln!(out, "map50={:.6}", self.map50);
        let _ = writeln!(out, "precision={:.6}", self.precision);
        let _ = writeln!(out, "recall={:.6}", self.recall);
        let _ = writeln!(out, "f1={:.6}", self.f1);
        let _ = writeln!(out, "tp={}", self.counts.tp);
        let _ = writeln!(out, "fp={}", self.counts.fp);
        let _ = writeln!(out, "fn={}", self.counts.fn_);
        for (i, name) in self.class_names.iter().enumerate() {
            match self.per_class_ap[i] {
                Some(ap) => {
                    let _ = writeln!(out, "ap_{name}={ap:.6}");
                }
                None => {
                    let _ = writeln!(out, "ap_{name}=n/a");
                }
            }
        }
        out
    }
}

/// Converts annotations into evaluation ground truth. DontCare regions,
/// heavily occluded or truncated objects, and unknown classes become ignore
/// regions that absorb detections without penalty.
pub fn gts_from_annotations(anns: &[crate::data::Annotation]) -> Vec<GtBox> {
    anns.iter()
        .map(|a| match a.class {
            Some(c) if !a.is_ignore() => GtBox { class: c, bbox: a.bbox, ignore: false },
            _ => GtBox { class: 0, bbox: a.bbox, ignore: true },
        })
        .collect()
}

/// One `class conf left top right bottom` line per detection.
pub fn format_detections(dets: &[DetectionBox], class_names: &[String]) -> String {
    let mut out = String::new();
    for d in dets {
        let name =
            class_names.get(d.class).map(|s| s.as_str()).unwrap_or("unknown");
        let _ = writeln!(
            out,
            "{name} {:.6} {:.2} {:.2} {:.2} {:.2}",
            d.confidence, d.bbox.left, d.bbox.top, d.bbox.right, d.bbox.bottom
        );
    }
    out
}
