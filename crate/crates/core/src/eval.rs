//! COCO-protocol average precision with tiny-object size buckets.
//!
//! Matching follows the COCO reference evaluator: per (image, category),
//! detections are ranked by score (stable, so equal scores keep input order)
//! and capped at `max_dets`; each takes the best still-unmatched ground truth
//! with IoU at or above the threshold. Ground truths outside the evaluated
//! area range are ignored, as are unmatched detections outside it. Precision
//! is read off the monotone envelope at 101 recall points.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::density::BBoxAnnotation;
use crate::error::{invalid, Result};

pub const DEFAULT_MAX_DETS: usize = 100;
/// Detection cap used for very dense scenes.
pub const DENSE_MAX_DETS: usize = 1500;
pub const RECALL_POINTS: usize = 101;
pub const IOU_THRESHOLDS: usize = 10;

/// `0.50, 0.55, ..., 0.95`.
pub fn iou_thresholds() -> [f64; IOU_THRESHOLDS] {
    std::array::from_fn(|i| 0.5 + i as f64 * (0.45 / 9.0))
}

/// A scored prediction; `bbox` is `[x, y, w, h]` with a top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        let [x, y, w, h] = self.bbox;
        if !(w > 0.0 && h > 0.0) || !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(invalid(format!(
                "detection box {:?} needs finite coordinates and positive extents",
                self.bbox
            )));
        }
        if !self.score.is_finite() {
            return Err(invalid(format!("detection score {} is not finite", self.score)));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.bbox[2] * self.bbox[3]
    }
}

/// Intersection over union of two `[x, y, w, h]` boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    if !(a[2] > 0.0 && a[3] > 0.0 && b[2] > 0.0 && b[3] > 0.0) {
        return Err(invalid(format!("boxes {a:?} and {b:?} need positive extents")));
    }
    Ok(iou_unchecked(a, b))
}

fn iou_unchecked(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = ((a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0])).max(0.0);
    let ih = ((a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a[2] * a[3] + b[2] * b[3] - inter)
}

/// Half-open gt area range `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AreaBucket {
    All,
    VeryTiny,
    Tiny,
    Small,
    Medium,
}

impl AreaBucket {
    pub const SIZED: [AreaBucket; 4] = [
        AreaBucket::VeryTiny,
        AreaBucket::Tiny,
        AreaBucket::Small,
        AreaBucket::Medium,
    ];

    pub fn range(self) -> (f64, f64) {
        match self {
            AreaBucket::All => (0.0, f64::INFINITY),
            AreaBucket::VeryTiny => (0.0, 64.0),
            AreaBucket::Tiny => (64.0, 256.0),
            AreaBucket::Small => (256.0, 1024.0),
            AreaBucket::Medium => (1024.0, f64::INFINITY),
        }
    }

    pub fn contains(self, area: f64) -> bool {
        let (lo, hi) = self.range();
        area >= lo && area < hi
    }

    /// The sized bucket holding `area`.
    pub fn of(area: f64) -> AreaBucket {
        Self::SIZED
            .into_iter()
            .find(|b| b.contains(area))
            .unwrap_or(AreaBucket::VeryTiny)
    }
}

/// Outcome of matching in one (image, category) group, in ranked order.
#[derive(Debug, Clone, Default, PartialEq)]
struct GroupEval {
    /// Scores of the kept detections, ranked.
    scores: Vec<f64>,
    matched: Vec<bool>,
    ignored: Vec<bool>,
    /// Ground truths inside the area range.
    n_gt: usize,
}

/// Per-detection and per-gt flags from [`match_detections`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// `Some(true)` for a true positive, `Some(false)` for a false positive,
    /// `None` when the detection fell beyond the per-image cap.
    pub det_flags: Vec<Option<bool>>,
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.det_flags.iter().filter(|f| **f == Some(true)).count()
    }

    pub fn fp(&self) -> usize {
        self.det_flags.iter().filter(|f| **f == Some(false)).count()
    }

    pub fn fn_count(&self) -> usize {
        self.gt_matched.iter().filter(|m| !**m).count()
    }
}

type Key = (u64, u64);

/// Indices of dets and gts per (image, category), input order preserved.
struct Groups {
    dets: BTreeMap<Key, Vec<usize>>,
    gts: BTreeMap<Key, Vec<usize>>,
}

impl Groups {
    fn new(dets: &[Detection], gts: &[BBoxAnnotation]) -> Self {
        let mut d: BTreeMap<Key, Vec<usize>> = BTreeMap::new();
        let mut g: BTreeMap<Key, Vec<usize>> = BTreeMap::new();
        for (i, det) in dets.iter().enumerate() {
            d.entry((det.category_id, det.image_id)).or_default().push(i);
        }
        for (i, gt) in gts.iter().enumerate() {
            g.entry((gt.category_id, gt.image_id)).or_default().push(i);
        }
        Self { dets: d, gts: g }
    }

    fn keys(&self) -> Vec<Key> {
        let mut k: Vec<Key> = self.dets.keys().chain(self.gts.keys()).copied().collect();
        k.sort_unstable();
        k.dedup();
        k
    }

    fn categories(&self) -> Vec<u64> {
        let mut c: Vec<u64> = self.keys().into_iter().map(|k| k.0).collect();
        c.dedup();
        c
    }
}

/// Ranks detection indices by descending score, stable, capped.
fn rank(dets: &[Detection], idx: &[usize], max_dets: usize) -> Vec<usize> {
    let mut order = idx.to_vec();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order.truncate(max_dets);
    order
}

/// COCO matching of one group. Returns the ranked kept detections and, per
/// ranked detection, the matched gt (index into `gt_idx`).
fn match_group(
    dets: &[Detection],
    det_idx: &[usize],
    gts: &[BBoxAnnotation],
    gt_idx: &[usize],
    thresh: f64,
    bucket: AreaBucket,
    max_dets: usize,
) -> (Vec<usize>, Vec<Option<usize>>, GroupEval) {
    let ranked = rank(dets, det_idx, max_dets);
    let gt_boxes: Vec<[f64; 4]> = gt_idx.iter().map(|&g| gts[g].to_xywh()).collect();
    let gt_ignored: Vec<bool> = gt_boxes.iter().map(|b| !bucket.contains(b[2] * b[3])).collect();
    // non-ignored ground truths first, stable
    let mut gt_order: Vec<usize> = (0..gt_idx.len()).collect();
    gt_order.sort_by_key(|&g| gt_ignored[g]);

    let mut gt_taken = vec![false; gt_idx.len()];
    let mut assignment = Vec::with_capacity(ranked.len());
    let mut eval = GroupEval {
        n_gt: gt_ignored.iter().filter(|i| !**i).count(),
        ..GroupEval::default()
    };
    for &d in &ranked {
        let mut best = thresh.min(1.0 - 1e-10);
        let mut hit: Option<usize> = None;
        for &g in &gt_order {
            if gt_taken[g] {
                continue;
            }
            if let Some(m) = hit {
                if !gt_ignored[m] && gt_ignored[g] {
                    break;
                }
            }
            let v = iou_unchecked(dets[d].bbox, gt_boxes[g]);
            if v < best {
                continue;
            }
            best = v;
            hit = Some(g);
        }
        let ignored = match hit {
            Some(g) => {
                gt_taken[g] = true;
                gt_ignored[g]
            }
            None => !bucket.contains(dets[d].area()),
        };
        assignment.push(hit);
        eval.scores.push(dets[d].score);
        eval.matched.push(hit.is_some());
        eval.ignored.push(ignored);
    }
    (ranked, assignment, eval)
}

fn validate_inputs(dets: &[Detection], gts: &[BBoxAnnotation]) -> Result<()> {
    for d in dets {
        d.validate()?;
    }
    for g in gts {
        if !(g.w > 0.0 && g.h > 0.0) {
            return Err(invalid(format!(
                "ground-truth box in image {} has non-positive extent",
                g.image_id
            )));
        }
    }
    Ok(())
}

/// Greedy matching over all groups at one IoU threshold, without area
/// restriction.
pub fn match_detections(
    dets: &[Detection],
    gts: &[BBoxAnnotation],
    iou_thresh: f64,
    max_dets: usize,
) -> Result<MatchResult> {
    validate_inputs(dets, gts)?;
    let groups = Groups::new(dets, gts);
    let mut result = MatchResult {
        det_flags: vec![None; dets.len()],
        gt_matched: vec![false; gts.len()],
    };
    let empty = Vec::new();
    for key in groups.keys() {
        let di = groups.dets.get(&key).unwrap_or(&empty);
        let gi = groups.gts.get(&key).unwrap_or(&empty);
        let (ranked, assignment, _) = match_group(dets, di, gts, gi, iou_thresh, AreaBucket::All, max_dets);
        for (d, hit) in ranked.into_iter().zip(assignment) {
            result.det_flags[d] = Some(hit.is_some());
            if let Some(g) = hit {
                result.gt_matched[gi[g]] = true;
            }
        }
    }
    Ok(result)
}

/// 101-point interpolated AP of TP/FP flags already ranked by score.
/// Returns -1 when there is no ground truth.
pub fn average_precision(flags: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return -1.0;
    }
    precision_curve(flags, total_gt).iter().sum::<f64>() / RECALL_POINTS as f64
}

/// Interpolated precision at recall `0, 0.01, ..., 1`.
fn precision_curve(flags: &[bool], total_gt: usize) -> [f64; RECALL_POINTS] {
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &f in flags {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / total_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    std::array::from_fn(|r| {
        let target = r as f64 / 100.0;
        let pos = recall.partition_point(|&x| x < target);
        precision.get(pos).copied().unwrap_or(0.0)
    })
}

/// Matching results of every group at one threshold and area range.
fn evaluate(
    dets: &[Detection],
    gts: &[BBoxAnnotation],
    groups: &Groups,
    thresh: f64,
    bucket: AreaBucket,
    max_dets: usize,
) -> BTreeMap<Key, GroupEval> {
    let empty = Vec::new();
    groups
        .keys()
        .into_iter()
        .map(|key| {
            let di = groups.dets.get(&key).unwrap_or(&empty);
            let gi = groups.gts.get(&key).unwrap_or(&empty);
            (key, match_group(dets, di, gts, gi, thresh, bucket, max_dets).2)
        })
        .collect()
}

/// Precision curve of one category, or `None` when it has no gt in range.
fn category_curve(evals: &BTreeMap<Key, GroupEval>, category: u64) -> Option<[f64; RECALL_POINTS]> {
    let mut scored = Vec::new();
    let mut n_gt = 0;
    for (_, e) in evals.range((category, 0)..=(category, u64::MAX)) {
        n_gt += e.n_gt;
        for i in 0..e.scores.len() {
            if !e.ignored[i] {
                scored.push((e.scores[i], e.matched[i]));
            }
        }
    }
    if n_gt == 0 {
        return None;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let flags: Vec<bool> = scored.into_iter().map(|(_, m)| m).collect();
    Some(precision_curve(&flags, n_gt))
}

/// Mean precision over categories and recall points at several thresholds,
/// or -1 when no category has ground truth in the bucket.
fn mean_ap(
    dets: &[Detection],
    gts: &[BBoxAnnotation],
    groups: &Groups,
    thresholds: &[f64],
    bucket: AreaBucket,
    max_dets: usize,
) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for &t in thresholds {
        let evals = evaluate(dets, gts, groups, t, bucket, max_dets);
        for cat in groups.categories() {
            if let Some(curve) = category_curve(&evals, cat) {
                total += curve.iter().sum::<f64>();
                n += RECALL_POINTS;
            }
        }
    }
    if n == 0 {
        -1.0
    } else {
        total / n as f64
    }
}

/// Seven-metric summary plus counts at IoU 0.5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_vt: f64,
    pub ap_t: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
}

impl ApReport {
    pub fn metrics(&self) -> [(&'static str, f64); 7] {
        [
            ("ap", self.ap),
            ("ap50", self.ap50),
            ("ap75", self.ap75),
            ("ap_vt", self.ap_vt),
            ("ap_t", self.ap_t),
            ("ap_s", self.ap_s),
            ("ap_m", self.ap_m),
        ]
    }
}

pub fn ap_report(dets: &[Detection], gts: &[BBoxAnnotation], max_dets: usize) -> Result<ApReport> {
    validate_inputs(dets, gts)?;
    let groups = Groups::new(dets, gts);
    let thresholds = iou_thresholds();
    let all = |t: &[f64]| mean_ap(dets, gts, &groups, t, AreaBucket::All, max_dets);
    let bucket = |b| mean_ap(dets, gts, &groups, &[0.5], b, max_dets);
    let m = match_detections(dets, gts, 0.5, max_dets)?;
    Ok(ApReport {
        ap: all(&thresholds),
        ap50: all(&[0.5]),
        ap75: all(&[0.75]),
        ap_vt: bucket(AreaBucket::VeryTiny),
        ap_t: bucket(AreaBucket::Tiny),
        ap_s: bucket(AreaBucket::Small),
        ap_m: bucket(AreaBucket::Medium),
        tp: m.tp(),
        fp: m.fp(),
        fn_count: m.fn_count(),
    })
}

/// AP per category at a single IoU threshold over all sizes; -1 for a
/// category without ground truth.
pub fn per_category_ap(
    dets: &[Detection],
    gts: &[BBoxAnnotation],
    iou_thresh: f64,
    max_dets: usize,
) -> Result<BTreeMap<u64, f64>> {
    validate_inputs(dets, gts)?;
    let groups = Groups::new(dets, gts);
    let evals = evaluate(dets, gts, &groups, iou_thresh, AreaBucket::All, max_dets);
    Ok(groups
        .categories()
        .into_iter()
        .map(|c| {
            let ap = category_curve(&evals, c).map_or(-1.0, |curve| curve.iter().sum::<f64>() / RECALL_POINTS as f64);
            (c, ap)
        })
        .collect())
}
