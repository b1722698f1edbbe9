//! Independent references shared by the core tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::f64::consts::PI;

use num_rational::Ratio;
use tinydense_core::eval::iou_thresholds;
use tinydense_core::{BBoxAnnotation, Detection, Tensor};

type Q = Ratio<i64>;

/// Inclusive `(r_min, r_max, c_min, c_max)`.
pub type Corners = (usize, usize, usize, usize);

/// Two-region refinement in exact rational arithmetic with 1-based
/// coordinates. Returns the refined mask (row-major 0/1) and the inclusive
/// 1-based rectangles `(r_min, r_max, c_min, c_max)`.
pub fn region_reference(mask: &[bool], h: usize, w: usize) -> (Vec<bool>, Vec<Corners>) {
    let mut pts: Vec<(i64, i64)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask[r * w + c] {
                pts.push((r as i64 + 1, c as i64 + 1));
            }
        }
    }
    if pts.is_empty() {
        return (vec![false; h * w], Vec::new());
    }
    let mut c1 = (Q::from_integer(1), Q::from_integer(1));
    let mut c2 = (Q::from_integer(h as i64), Q::from_integer(w as i64));
    let mut labels = vec![1u8; pts.len()];
    for _ in 0..100 {
        for (i, &(r, c)) in pts.iter().enumerate() {
            let (r, c) = (Q::from_integer(r), Q::from_integer(c));
            let d1 = (r - c1.0) * (r - c1.0) + (c - c1.1) * (c - c1.1);
            let d2 = (r - c2.0) * (r - c2.0) + (c - c2.1) * (c - c2.1);
            labels[i] = if d1 <= d2 { 1 } else { 2 };
        }
        let mean = |k: u8| {
            let members: Vec<&(i64, i64)> = pts
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == k)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                return None;
            }
            let n = members.len() as i64;
            let sr: i64 = members.iter().map(|p| p.0).sum();
            let sc: i64 = members.iter().map(|p| p.1).sum();
            Some((Q::new(sr, n), Q::new(sc, n)))
        };
        let n1 = mean(1).unwrap_or(c1);
        let n2 = mean(2).unwrap_or(c2);
        let shift = |a: (Q, Q), b: (Q, Q)| {
            let d = (a.0 - b.0) * (a.0 - b.0) + (a.1 - b.1) * (a.1 - b.1);
            (*d.numer() as f64 / *d.denom() as f64).sqrt()
        };
        let moved = shift(c1, n1).max(shift(c2, n2));
        c1 = n1;
        c2 = n2;
        if moved <= 1e-6 {
            break;
        }
    }
    let mut rects = Vec::new();
    for k in [1u8, 2] {
        let members: Vec<(i64, i64)> = pts
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == k)
            .map(|(p, _)| *p)
            .collect();
        if members.is_empty() {
            continue;
        }
        let r_min = members.iter().map(|p| p.0).min().unwrap() as usize;
        let r_max = members.iter().map(|p| p.0).max().unwrap() as usize;
        let c_min = members.iter().map(|p| p.1).min().unwrap() as usize;
        let c_max = members.iter().map(|p| p.1).max().unwrap() as usize;
        rects.push((r_min, r_max, c_min, c_max));
    }
    let mut out = vec![false; h * w];
    for &(r0, r1, c0, c1) in &rects {
        for r in r0..=r1 {
            for c in c0..=c1 {
                out[(r - 1) * w + (c - 1)] = true;
            }
        }
    }
    (out, rects)
}

fn overlap(a: [f64; 4], b: [f64; 4]) -> f64 {
    let x0 = a[0].max(b[0]);
    let y0 = a[1].max(b[1]);
    let x1 = (a[0] + a[2]).min(b[0] + b[2]);
    let y1 = (a[1] + a[3]).min(b[1] + b[3]);
    if x1 <= x0 || y1 <= y0 {
        return 0.0;
    }
    let inter = (x1 - x0) * (y1 - y0);
    inter / (a[2] * a[3] + b[2] * b[3] - inter)
}

/// Area range `[lo, hi)` of a bucket index: all, <8^2, [8^2,16^2), [16^2,32^2), >=32^2.
pub const AREA_RANGES: [(f64, f64); 5] = [
    (0.0, f64::INFINITY),
    (0.0, 64.0),
    (64.0, 256.0),
    (256.0, 1024.0),
    (1024.0, f64::INFINITY),
];

fn in_range(area: f64, range: (f64, f64)) -> bool {
    area >= range.0 && area < range.1
}

/// `(score, true positive)` of every counted detection of one category at
/// one threshold, plus the number of counted ground truths.
fn category_hits(
    dets: &[Detection],
    gts: &[BBoxAnnotation],
    category: u64,
    thresh: f64,
    range: (f64, f64),
    max_dets: usize,
) -> (Vec<(f64, bool)>, usize) {
    let images: BTreeSet<u64> = dets
        .iter()
        .map(|d| (d.category_id, d.image_id))
        .chain(gts.iter().map(|g| (g.category_id, g.image_id)))
        .filter(|k| k.0 == category)
        .map(|k| k.1)
        .collect();
    let mut hits = Vec::new();
    let mut n_gt = 0;
    for img in images {
        let boxes: Vec<[f64; 4]> = gts
            .iter()
            .filter(|g| g.category_id == category && g.image_id == img)
            .map(|g| g.to_xywh())
            .collect();
        let ignored: Vec<bool> = boxes.iter().map(|b| !in_range(b[2] * b[3], range)).collect();
        n_gt += ignored.iter().filter(|i| !**i).count();
        let mut mine: Vec<&Detection> = dets
            .iter()
            .filter(|d| d.category_id == category && d.image_id == img)
            .collect();
        // stable: equal scores keep input order
        mine.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        mine.truncate(max_dets);
        let mut taken = vec![false; boxes.len()];
        for d in mine {
            let floor = thresh.min(1.0 - 1e-10);
            // prefer counted ground truths; among equals the later one wins
            let pick = |want_ignored: bool, taken: &[bool]| {
                let mut best: Option<(usize, f64)> = None;
                for g in 0..boxes.len() {
                    if taken[g] || ignored[g] != want_ignored {
                        continue;
                    }
                    let v = overlap(d.bbox, boxes[g]);
                    if v >= floor && best.is_none_or(|(_, b)| v >= b) {
                        best = Some((g, v));
                    }
                }
                best.map(|(g, _)| g)
            };
            let hit = pick(false, &taken).or_else(|| pick(true, &taken));
            let skip = match hit {
                Some(g) => {
                    taken[g] = true;
                    ignored[g]
                }
                None => !in_range(d.bbox[2] * d.bbox[3], range),
            };
            if !skip {
                hits.push((d.score, hit.is_some()));
            }
        }
    }
    hits.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    (hits, n_gt)
}

/// 101-point AP by scanning every prefix of the ranked list for each recall
/// level: the interpolated precision is the best precision among prefixes
/// whose recall reaches the level.
pub fn staircase_ap(flags: &[bool], n_gt: usize) -> f64 {
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let mut best: f64 = 0.0;
        let mut tp = 0usize;
        for (k, &f) in flags.iter().enumerate() {
            tp += f as usize;
            if tp as f64 / n_gt as f64 >= level {
                best = best.max(tp as f64 / (k + 1) as f64);
            }
        }
        total += best;
    }
    total / 101.0
}

fn mean_ap(dets: &[Detection], gts: &[BBoxAnnotation], thresholds: &[f64], range: (f64, f64), max_dets: usize) -> f64 {
    let categories: BTreeSet<u64> = dets
        .iter()
        .map(|d| d.category_id)
        .chain(gts.iter().map(|g| g.category_id))
        .collect();
    let mut aps = Vec::new();
    for &t in thresholds {
        for &c in &categories {
            let (hits, n_gt) = category_hits(dets, gts, c, t, range, max_dets);
            if n_gt > 0 {
                let flags: Vec<bool> = hits.iter().map(|h| h.1).collect();
                aps.push(staircase_ap(&flags, n_gt));
            }
        }
    }
    if aps.is_empty() {
        -1.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// `[ap, ap50, ap75, ap_vt, ap_t, ap_s, ap_m]` and `(tp, fp, fn)` at IoU 0.5.
pub fn report_reference(
    dets: &[Detection],
    gts: &[BBoxAnnotation],
    max_dets: usize,
) -> ([f64; 7], (usize, usize, usize)) {
    let all = AREA_RANGES[0];
    let metrics = [
        mean_ap(dets, gts, &iou_thresholds(), all, max_dets),
        mean_ap(dets, gts, &[0.5], all, max_dets),
        mean_ap(dets, gts, &[0.75], all, max_dets),
        mean_ap(dets, gts, &[0.5], AREA_RANGES[1], max_dets),
        mean_ap(dets, gts, &[0.5], AREA_RANGES[2], max_dets),
        mean_ap(dets, gts, &[0.5], AREA_RANGES[3], max_dets),
        mean_ap(dets, gts, &[0.5], AREA_RANGES[4], max_dets),
    ];
    let categories: BTreeSet<u64> = dets
        .iter()
        .map(|d| d.category_id)
        .chain(gts.iter().map(|g| g.category_id))
        .collect();
    let (mut tp, mut fp) = (0, 0);
    for c in categories {
        let (hits, _) = category_hits(dets, gts, c, 0.5, all, max_dets);
        tp += hits.iter().filter(|h| h.1).count();
        fp += hits.iter().filter(|h| !h.1).count();
    }
    (metrics, (tp, fp, gts.len() - tp))
}

pub fn dct_scale(k: usize, n: usize) -> f64 {
    if k == 0 {
        (1.0 / n as f64).sqrt()
    } else {
        (2.0 / n as f64).sqrt()
    }
}

pub fn dct_cos(i: usize, k: usize, n: usize) -> f64 {
    (PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos()
}

/// Orthonormal DCT-II straight from the double-sum definition.
pub fn naive_dct2(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw().unwrap();
    Tensor::from_fn(&[c, h, w], |idx| {
        let (ch, u, v) = (idx / (h * w), idx / w % h, idx % w);
        let mut acc = 0.0;
        for i in 0..h {
            for j in 0..w {
                acc += x.at3(ch, i, j) * dct_cos(i, u, h) * dct_cos(j, v, w);
            }
        }
        dct_scale(u, h) * dct_scale(v, w) * acc
    })
    .unwrap()
}

pub fn naive_idct2(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw().unwrap();
    Tensor::from_fn(&[c, h, w], |idx| {
        let (ch, i, j) = (idx / (h * w), idx / w % h, idx % w);
        let mut acc = 0.0;
        for u in 0..h {
            for v in 0..w {
                acc += dct_scale(u, h) * dct_scale(v, w) * x.at3(ch, u, v) * dct_cos(i, u, h) * dct_cos(j, v, w);
            }
        }
        acc
    })
    .unwrap()
}
