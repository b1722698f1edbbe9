//! Seeded synthetic scenes of clustered tiny rectangles.

use serde::{Deserialize, Serialize};

use crate::density::BBoxAnnotation;
use crate::error::{invalid, Result};
use crate::eval::Detection;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub n_clusters: usize,
    /// Inclusive range of objects drawn per cluster.
    pub objects_per_cluster: (usize, usize),
    /// Inclusive range of object side lengths in pixels.
    pub object_size: (usize, usize),
    /// Standard deviation of object centers around their cluster center.
    pub cluster_spread: f64,
    pub noise_sigma: f64,
    pub image_id: u64,
    pub category_id: u64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            n_clusters: 2,
            objects_per_cluster: (10, 10),
            object_size: (4, 16),
            cluster_spread: 20.0,
            noise_sigma: 0.05,
            image_id: 1,
            category_id: 1,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (omin, omax) = self.objects_per_cluster;
        let (smin, smax) = self.object_size;
        if self.width == 0 || self.height == 0 {
            return Err(invalid("scene extents must be positive"));
        }
        if omin > omax || smin > smax {
            return Err(invalid("object count and size ranges must satisfy min <= max"));
        }
        if smin == 0 {
            return Err(invalid("object sizes must be at least 1 pixel"));
        }
        if smax > self.width.min(self.height) {
            return Err(invalid(format!(
                "objects up to {smax} px do not fit a {}x{} image",
                self.width, self.height
            )));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return Err(invalid("cluster spread must be finite and >= 0"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid("noise sigma must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `[1, H, W]`.
    pub image: Tensor,
    pub annotations: Vec<BBoxAnnotation>,
    /// Cluster centers `(x, y)` in pixels.
    pub centers: Vec<(f64, f64)>,
}

/// Top-left pixel of a `size`-wide box centered near `center`, kept inside `[0, extent)`.
fn place(center: f64, size: usize, extent: usize) -> usize {
    let start = (center - size as f64 / 2.0).round();
    start.clamp(0.0, (extent - size) as f64) as usize
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = SplitMix64::new(spec.seed);
    let margin = spec.object_size.1 as f64 / 2.0;
    let mut data = vec![0.0; w * h];
    let mut annotations = Vec::new();
    let mut centers = Vec::with_capacity(spec.n_clusters);
    for _ in 0..spec.n_clusters {
        let cx = rng.uniform(margin, w as f64 - margin);
        let cy = rng.uniform(margin, h as f64 - margin);
        centers.push((cx, cy));
        let n = rng.range_inclusive(spec.objects_per_cluster.0 as u64, spec.objects_per_cluster.1 as u64);
        for _ in 0..n {
            let ow = rng.range_inclusive(spec.object_size.0 as u64, spec.object_size.1 as u64) as usize;
            let oh = rng.range_inclusive(spec.object_size.0 as u64, spec.object_size.1 as u64) as usize;
            let x0 = place(cx + spec.cluster_spread * rng.normal(), ow, w);
            let y0 = place(cy + spec.cluster_spread * rng.normal(), oh, h);
            for r in y0..y0 + oh {
                data[r * w + x0..r * w + x0 + ow].fill(1.0);
            }
            annotations.push(BBoxAnnotation::from_xywh(
                spec.image_id,
                spec.category_id,
                [x0 as f64, y0 as f64, ow as f64, oh as f64],
            ));
        }
    }
    if spec.noise_sigma > 0.0 {
        for v in &mut data {
            *v += spec.noise_sigma * rng.normal();
        }
    }
    Ok(Scene {
        image: Tensor::new(vec![1, h, w], data)?,
        annotations,
        centers,
    })
}

/// Noisy detections derived from ground truth. Each box is kept with
/// probability `1 - drop_rate`, its center and extents shifted by uniform
/// noise in `[-jitter_px, jitter_px]`, and scored by how little it moved plus
/// uniform noise in `[-score_noise, score_noise]`, clamped to `[0, 1]`.
pub fn perturb_detections(
    gts: &[BBoxAnnotation],
    jitter_px: f64,
    drop_rate: f64,
    score_noise: f64,
    seed: u64,
) -> Result<Vec<Detection>> {
    if !(jitter_px >= 0.0 && jitter_px.is_finite() && score_noise >= 0.0 && score_noise.is_finite()) {
        return Err(invalid("jitter and score noise must be finite and >= 0"));
    }
    if !(0.0..=1.0).contains(&drop_rate) {
        return Err(invalid(format!("drop rate {drop_rate} outside [0, 1]")));
    }
    let mut rng = SplitMix64::new(seed);
    let mut dets = Vec::with_capacity(gts.len());
    for g in gts {
        if rng.next_f64() < drop_rate {
            continue;
        }
        let shifts: [f64; 4] = std::array::from_fn(|_| rng.uniform(-jitter_px, jitter_px));
        let moved = if jitter_px > 0.0 {
            shifts.iter().map(|s| s.abs()).sum::<f64>() / (4.0 * jitter_px)
        } else {
            0.0
        };
        let score = (1.0 - moved + rng.uniform(-score_noise, score_noise)).clamp(0.0, 1.0);
        let bw = (g.w + shifts[2]).max(0.5 * g.w);
        let bh = (g.h + shifts[3]).max(0.5 * g.h);
        let cx = g.cx + shifts[0];
        let cy = g.cy + shifts[1];
        dets.push(Detection {
            image_id: g.image_id,
            category_id: g.category_id,
            bbox: [cx - bw / 2.0, cy - bh / 2.0, bw, bh],
            score,
        });
    }
    Ok(dets)
}
