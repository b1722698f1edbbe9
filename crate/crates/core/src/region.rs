//! Density thresholding, two-cluster region mining and the focus bank.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Tape, Var};
use crate::density::DensityMap;
use crate::error::{invalid, Result};
use crate::params::ParamBundle;
use crate::tensor::Tensor;

/// Pooling window (and stride) of the focus bank.
pub const FOCUS_POOL: usize = 7;
pub const DEFAULT_QUANTILE: f64 = 0.10;
pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

/// A `[1, H, W]` tensor whose entries are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask(Tensor);

impl BinaryMask {
    pub fn new(t: Tensor) -> Result<Self> {
        let (c, _, _) = t.chw()?;
        if c != 1 {
            return Err(invalid(format!("mask must have one channel, got {:?}", t.shape())));
        }
        if let Some(v) = t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(invalid(format!("mask entry {v} is not 0 or 1")));
        }
        Ok(Self(t))
    }

    pub fn zeros(h: usize, w: usize) -> Result<Self> {
        Ok(Self(Tensor::zeros(&[1, h, w])?))
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        Ok(Self(Tensor::from_fn(&[1, h, w], |i| {
            if f(i / w, i % w) {
                1.0
            } else {
                0.0
            }
        })?))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.0.data()[r * self.width() + c] == 1.0
    }

    pub fn count(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == 1.0).count()
    }

    /// Active cells in row-major order, 0-based `(row, col)`.
    pub fn active_points(&self) -> Vec<(usize, usize)> {
        let w = self.width();
        self.0
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| (i / w, i % w))
            .collect()
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Inclusive, 0-based rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub r_min: usize,
    pub r_max: usize,
    pub c_min: usize,
    pub c_max: usize,
}

impl Rect {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.r_min..=self.r_max).contains(&r) && (self.c_min..=self.c_max).contains(&c)
    }

    pub fn area(&self) -> usize {
        (self.r_max - self.r_min + 1) * (self.c_max - self.c_min + 1)
    }

    /// The same rectangle with 1-based corners.
    pub fn one_based(&self) -> Rect {
        Rect {
            r_min: self.r_min + 1,
            r_max: self.r_max + 1,
            c_min: self.c_min + 1,
            c_max: self.c_max + 1,
        }
    }
}

/// Bounding rectangles of the (at most two) clusters, cluster 1 first.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegionSet {
    pub rects: Vec<Rect>,
}

impl RegionSet {
    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.rects.iter().any(|rc| rc.contains(r, c))
    }
}

/// How the density threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "lowercase")]
pub enum Threshold {
    /// Keep cells with `D >= tau`.
    Absolute(f64),
    /// Keep the top `ceil(p * H * W)` cells (plus any tied with the cut value).
    Quantile(f64),
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Quantile(DEFAULT_QUANTILE)
    }
}

/// Initial binary mask from a density map.
///
/// In quantile mode an all-zero map yields an empty mask: there is no dense
/// region to select.
pub fn threshold_mask(d: &DensityMap, mode: Threshold) -> Result<BinaryMask> {
    let v = d.values();
    let tau = match mode {
        Threshold::Absolute(tau) => {
            if !(tau >= 0.0 && tau.is_finite()) {
                return Err(invalid(format!(
                    "absolute threshold must be finite and >= 0, got {tau}"
                )));
            }
            tau
        }
        Threshold::Quantile(p) => {
            if !(p > 0.0 && p <= 1.0) {
                return Err(invalid(format!("quantile must be in (0, 1], got {p}")));
            }
            if v.data().iter().all(|&x| x == 0.0) {
                return BinaryMask::zeros(d.height(), d.width());
            }
            let n = v.len();
            // guard against p * n landing a hair above an integer
            let keep = ((p * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
            let mut sorted = v.data().to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            sorted[keep - 1]
        }
    };
    BinaryMask::new(v.map(|x| if x >= tau { 1.0 } else { 0.0 }))
}

/// Running sum of a cluster; the centroid is `sum / count`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Cluster {
    sum_r: i128,
    sum_c: i128,
    count: i128,
}

impl Cluster {
    fn at(r: usize, c: usize) -> Self {
        Self {
            sum_r: r as i128,
            sum_c: c as i128,
            count: 1,
        }
    }

    fn centroid(&self) -> (f64, f64) {
        (
            self.sum_r as f64 / self.count as f64,
            self.sum_c as f64 / self.count as f64,
        )
    }

    /// `count^2 * |p - centroid|^2`, exact.
    fn scaled_dist2(&self, r: usize, c: usize) -> Option<i128> {
        let dr = (r as i128).checked_mul(self.count)? - self.sum_r;
        let dc = (c as i128).checked_mul(self.count)? - self.sum_c;
        dr.checked_mul(dr)?.checked_add(dc.checked_mul(dc)?)
    }
}

/// True when `p` is at least as close to `a` as to `b`.
fn closer_or_tied(a: &Cluster, b: &Cluster, r: usize, c: usize) -> bool {
    let exact = (|| {
        let lhs = a.scaled_dist2(r, c)?.checked_mul(b.count.checked_mul(b.count)?)?;
        let rhs = b.scaled_dist2(r, c)?.checked_mul(a.count.checked_mul(a.count)?)?;
        Some(lhs <= rhs)
    })();
    exact.unwrap_or_else(|| {
        let dist = |k: &Cluster| {
            let (cr, cc) = k.centroid();
            (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)
        };
        dist(a) <= dist(b)
    })
}

/// Two-means clustering of 0-based `(row, col)` points.
///
/// Centroids start at the opposite corners `(0, 0)` and `(h - 1, w - 1)` and
/// follow Lloyd iterations until no centroid moves more than `tol` or
/// `max_iter` rounds have run. Distances are compared exactly on integer
/// coordinates; equidistant points go to cluster 1. An empty cluster keeps
/// its previous centroid. Labels are 1 or 2.
pub fn kmeans2(points: &[(usize, usize)], h: usize, w: usize, max_iter: usize, tol: f64) -> Result<Vec<u8>> {
    if points.is_empty() {
        return Err(invalid("kmeans2 needs at least one point"));
    }
    if h == 0 || w == 0 {
        return Err(invalid("kmeans2 grid extents must be positive"));
    }
    let mut centers = [Cluster::at(0, 0), Cluster::at(h - 1, w - 1)];
    let mut labels = vec![1u8; points.len()];
    for _ in 0..max_iter.max(1) {
        let mut next = [
            Cluster {
                sum_r: 0,
                sum_c: 0,
                count: 0,
            },
            Cluster {
                sum_r: 0,
                sum_c: 0,
                count: 0,
            },
        ];
        for (label, &(r, c)) in labels.iter_mut().zip(points) {
            let k = if closer_or_tied(&centers[0], &centers[1], r, c) {
                0
            } else {
                1
            };
            *label = k as u8 + 1;
            next[k].sum_r += r as i128;
            next[k].sum_c += c as i128;
            next[k].count += 1;
        }
        let mut moved: f64 = 0.0;
        for (center, n) in centers.iter_mut().zip(next) {
            if n.count == 0 {
                continue;
            }
            let (a, b) = (center.centroid(), n.centroid());
            moved = moved.max(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt());
            *center = n;
        }
        if moved <= tol {
            break;
        }
    }
    Ok(labels)
}

/// Replaces the active cells of `m` by the bounding rectangles of their two
/// clusters.
pub fn refine_mask(m: &BinaryMask) -> Result<(BinaryMask, RegionSet)> {
    let (h, w) = (m.height(), m.width());
    let points = m.active_points();
    if points.is_empty() {
        return Ok((BinaryMask::zeros(h, w)?, RegionSet::default()));
    }
    let labels = kmeans2(&points, h, w, KMEANS_MAX_ITER, KMEANS_TOL)?;
    let mut rects = Vec::with_capacity(2);
    for k in [1u8, 2] {
        let members = points.iter().zip(&labels).filter(|(_, &l)| l == k).map(|(p, _)| *p);
        let bounds = members.fold(None, |acc: Option<Rect>, (r, c)| {
            Some(match acc {
                None => Rect {
                    r_min: r,
                    r_max: r,
                    c_min: c,
                    c_max: c,
                },
                Some(b) => Rect {
                    r_min: b.r_min.min(r),
                    r_max: b.r_max.max(r),
                    c_min: b.c_min.min(c),
                    c_max: b.c_max.max(c),
                },
            })
        });
        rects.extend(bounds);
    }
    let regions = RegionSet { rects };
    let refined = BinaryMask::from_fn(h, w, |r, c| regions.contains(r, c))?;
    Ok((refined, regions))
}

/// Threshold, then refine.
pub fn select_regions(d: &DensityMap, mode: Threshold) -> Result<(BinaryMask, RegionSet)> {
    refine_mask(&threshold_mask(d, mode)?)
}

/// Records the refined mask of `d` on the tape as a non-differentiable node.
pub fn select_regions_on(tape: &mut Tape, d: Var, mode: Threshold) -> Result<(Var, RegionSet)> {
    let map = DensityMap::new(tape.value(d).clone())?;
    let (mask, regions) = select_regions(&map, mode)?;
    let v = tape.stop_gradient(d, mask.into_tensor(), "density region selection");
    Ok((v, regions))
}

/// `conv1x1(avg_pool_7(mask * x))` with weights `{prefix}.w` `[d, C, 1, 1]` and
/// bias `{prefix}.b` `[d]`.
pub fn focus_bank_on(tape: &mut Tape, x: Var, mask: Var, p: &Bound, prefix: &str) -> Result<Var> {
    let (_, h, w) = tape.value(x).chw()?;
    let (mc, mh, mw) = tape.value(mask).chw()?;
    if (mc, mh, mw) != (1, h, w) {
        return Err(invalid(format!(
            "mask shape {:?} does not match features {:?}",
            tape.value(mask).shape(),
            tape.value(x).shape()
        )));
    }
    let masked = tape.mul(x, mask)?;
    let pooled = tape.avg_pool(masked, FOCUS_POOL, FOCUS_POOL)?;
    let wt = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    tape.conv2d(pooled, wt, Some(b), 1, 0)
}

pub fn focus_bank(x: &Tensor, mask: &BinaryMask, params: &ParamBundle, prefix: &str) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = tape.bind(params, false);
    let xv = tape.constant(x.clone());
    let mv = tape.constant(mask.values().clone());
    let out = focus_bank_on(&mut tape, xv, mv, &p, prefix)?;
    Ok(tape.value(out).clone())
}
