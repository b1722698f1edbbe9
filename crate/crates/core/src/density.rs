//! Ground-truth density maps, the density regression branch, density losses
//! and the calibrated foreground prior.
//!
//! Coordinates are in pixels; the density value of pixel `(row, col)` is the
//! kernel evaluated at `x = col`, `y = row`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::params::{ParamBuilder, ParamBundle};
use crate::tensor::Tensor;

/// An axis-aligned box given by its center and extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBoxAnnotation {
    pub image_id: u64,
    pub category_id: u64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BBoxAnnotation {
    /// From a top-left `(x, y, w, h)` box.
    pub fn from_xywh(image_id: u64, category_id: u64, xywh: [f64; 4]) -> Self {
        let [x, y, w, h] = xywh;
        Self {
            image_id,
            category_id,
            cx: x + w / 2.0,
            cy: y + h / 2.0,
            w,
            h,
            score: None,
        }
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h]
    }

    /// The box intersected with `[0, width] x [0, height]`, or `None` when
    /// nothing with positive extent remains.
    pub fn clamped(&self, width: f64, height: f64) -> Option<Self> {
        if !(self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite()) {
            return None;
        }
        let (lx, hx) = (self.cx - self.w / 2.0, self.cx + self.w / 2.0);
        let (ly, hy) = (self.cy - self.h / 2.0, self.cy + self.h / 2.0);
        if self.w > 0.0 && self.h > 0.0 && lx >= 0.0 && ly >= 0.0 && hx <= width && hy <= height {
            return Some(*self);
        }
        let (x0, x1) = (lx.max(0.0), hx.min(width));
        let (y0, y1) = (ly.max(0.0), hy.min(height));
        let (w, h) = (x1 - x0, y1 - y0);
        if w <= 0.0 || h <= 0.0 {
            return None;
        }
        Some(Self {
            cx: x0 + w / 2.0,
            cy: y0 + h / 2.0,
            w,
            h,
            ..*self
        })
    }

    /// Kernel bandwidth `0.5 * sqrt(w^2 + h^2)`.
    pub fn bandwidth(&self) -> f64 {
        0.5 * (self.w * self.w + self.h * self.h).sqrt()
    }
}

/// A single-channel, non-negative `[1, H, W]` map.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap(Tensor);

impl DensityMap {
    pub fn new(t: Tensor) -> Result<Self> {
        let (c, _, _) = t.chw()?;
        if c != 1 {
            return Err(invalid(format!(
                "density map must have one channel, got shape {:?}",
                t.shape()
            )));
        }
        if !t.all_finite() {
            return Err(Error::Numeric("density map holds NaN or infinite values".into()));
        }
        if let Some(bad) = t.data().iter().find(|v| **v < 0.0) {
            return Err(invalid(format!("density value {bad} is negative")));
        }
        Ok(Self(t))
    }

    pub fn zeros(h: usize, w: usize) -> Result<Self> {
        Ok(Self(Tensor::zeros(&[1, h, w])?))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.sum()
    }

    /// Bilinear resize; convex weights keep the map non-negative.
    pub fn resized(&self, h: usize, w: usize) -> Result<Self> {
        Ok(Self(crate::ops::bilinear_resize(&self.0, h, w)?))
    }
}

/// A synthesized density map plus the annotations that could not be used.
#[derive(Debug, Clone)]
pub struct GtDensity {
    pub map: DensityMap,
    /// Annotations with no positive-area overlap with the image.
    pub skipped: usize,
}

/// Sums one truncated Gaussian per annotation.
///
/// Each kernel has bandwidth `0.5 * sqrt(w^2 + h^2)` of the (clamped) box, is
/// centered on the box center, and is cut off outside a disk of radius
/// `ceil(3 * bandwidth)`. Kernels are not renormalized after truncation.
pub fn gt_density(annotations: &[BBoxAnnotation], height: usize, width: usize) -> Result<GtDensity> {
    let mut map = Tensor::zeros(&[1, height, width])?;
    let mut skipped = 0;
    let data = map.data_mut();
    for ann in annotations {
        let Some(b) = ann.clamped(width as f64, height as f64) else {
            skipped += 1;
            continue;
        };
        splat_gaussian(data, height, width, b.cx, b.cy, b.bandwidth());
    }
    if skipped > 0 {
        log::warn!("gt_density skipped {skipped} annotation(s) outside the image");
    }
    Ok(GtDensity {
        map: DensityMap::new(map)?,
        skipped,
    })
}

fn splat_gaussian(data: &mut [f64], height: usize, width: usize, cx: f64, cy: f64, gamma: f64) {
    let radius = (3.0 * gamma).ceil();
    let r2 = radius * radius;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * gamma * gamma);
    let denom = 2.0 * gamma * gamma;
    // integer anchor + fractional offset, so integer shifts move the window exactly
    let (ax, fx) = (cx.floor(), cx - cx.floor());
    let (ay, fy) = (cy.floor(), cy - cy.floor());
    let x_lo = (ax - radius).max(0.0) as i64;
    let x_hi = (ax + radius + 1.0).min(width as f64 - 1.0) as i64;
    let y_lo = (ay - radius).max(0.0) as i64;
    let y_hi = (ay + radius + 1.0).min(height as f64 - 1.0) as i64;
    for y in y_lo..=y_hi {
        let dy = (y as f64 - ay) - fy;
        for x in x_lo..=x_hi {
            let dx = (x as f64 - ax) - fx;
            let d2 = dx * dx + dy * dy;
            if d2 <= r2 {
                data[y as usize * width + x as usize] += norm * (-d2 / denom).exp();
            }
        }
    }
}

/// Mean squared error between two same-shaped density maps.
pub fn density_loss(pred: &DensityMap, gt: &DensityMap) -> Result<f64> {
    if pred.values().shape() != gt.values().shape() {
        return Err(invalid(format!(
            "density_loss shape mismatch {:?} vs {:?}",
            pred.values().shape(),
            gt.values().shape()
        )));
    }
    let n = gt.values().len() as f64;
    let total: f64 = gt
        .values()
        .data()
        .iter()
        .zip(pred.values().data())
        .map(|(g, p)| (g - p) * (g - p))
        .sum();
    Ok(total / n)
}

/// Coefficients of the combined detection + density objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub reg: f64,
    pub cls: f64,
    pub dense: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reg: 1.0,
            cls: 1.0,
            dense: 1.0,
        }
    }
}

impl LossWeights {
    pub fn combine(&self, l_reg: f64, l_cls: f64, l_dense: f64) -> Result<f64> {
        for (name, v) in [("reg", l_reg), ("cls", l_cls), ("dense", l_dense)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("{name} loss must be finite and >= 0, got {v}")));
            }
        }
        Ok(self.reg * l_reg + self.cls * l_cls + self.dense * l_dense)
    }
}

/// Unweighted sum `l_reg + l_cls + l_dense`.
pub fn total_loss(l_reg: f64, l_cls: f64, l_dense: f64) -> Result<f64> {
    LossWeights::default().combine(l_reg, l_cls, l_dense)
}

/// Shape of the density regression network.
///
/// Encoder stage `i` is a stride-2 3x3 conv + ReLU; decoder stage `i` is a
/// 2x bilinear upsample, 3x3 conv and ReLU; the regressor is a 3x3 conv to one
/// channel followed by ReLU. All hidden layers have `base_channels` channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DgbConfig {
    pub in_channels: usize,
    pub encoder_stages: usize,
    pub decoder_stages: usize,
    pub base_channels: usize,
}

impl Default for DgbConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            encoder_stages: 3,
            decoder_stages: 3,
            base_channels: 8,
        }
    }
}

impl DgbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_stages == 0 || self.encoder_stages != self.decoder_stages {
            return Err(invalid(format!(
                "encoder/decoder stages must match and be >= 1, got {}/{}",
                self.encoder_stages, self.decoder_stages
            )));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(invalid("channel counts must be positive"));
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn granularity(&self) -> usize {
        1 << self.encoder_stages
    }

    /// Parameters under `dgb.enc{i}`, `dgb.dec{i}` and `dgb.reg`.
    pub fn declare(&self, b: &mut ParamBuilder) -> Result<()> {
        self.validate()?;
        let c = self.base_channels;
        for i in 0..self.encoder_stages {
            let cin = if i == 0 { self.in_channels } else { c };
            b.conv(&format!("dgb.enc{i}"), cin, c, 3, true)?;
        }
        for i in 0..self.decoder_stages {
            b.conv(&format!("dgb.dec{i}"), c, c, 3, true)?;
        }
        b.conv("dgb.reg", c, 1, 3, true)
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamBundle> {
        let mut b = ParamBuilder::new(seed);
        self.declare(&mut b)?;
        Ok(b.finish())
    }
}

fn conv_relu(tape: &mut Tape, x: Var, p: &Bound, prefix: &str, stride: usize) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    let y = tape.conv2d(x, w, Some(b), stride, 1)?;
    Ok(tape.relu(y))
}

/// Density regression forward pass on a tape; returns a `[1, H, W]` node.
pub fn dgb_forward_on(tape: &mut Tape, x: Var, p: &Bound, cfg: &DgbConfig) -> Result<Var> {
    cfg.validate()?;
    let (_, h, w) = tape.value(x).chw()?;
    let g = cfg.granularity();
    if h % g != 0 || w % g != 0 {
        return Err(invalid(format!(
            "input {h}x{w} is not divisible by {g}; pad before the density branch"
        )));
    }
    let mut cur = x;
    for i in 0..cfg.encoder_stages {
        cur = conv_relu(tape, cur, p, &format!("dgb.enc{i}"), 2)?;
    }
    for i in 0..cfg.decoder_stages {
        let (_, ch, cw) = tape.value(cur).chw()?;
        let up = tape.resize(cur, ch * 2, cw * 2)?;
        cur = conv_relu(tape, up, p, &format!("dgb.dec{i}"), 1)?;
    }
    conv_relu(tape, cur, p, "dgb.reg", 1)
}

pub fn dgb_forward(input: &Tensor, params: &ParamBundle, cfg: &DgbConfig) -> Result<DensityMap> {
    let mut tape = Tape::new();
    let p = tape.bind(params, false);
    let x = tape.constant(input.clone());
    let y = dgb_forward_on(&mut tape, x, &p, cfg)?;
    DensityMap::new(tape.value(y).clone())
}

/// Hidden width of the calibration head.
pub const CALIBRATION_MID_CHANNELS: usize = 4;

/// Calibration head: `cal.c1` (3x3, 1 -> mid) and `cal.c2` (1x1, mid -> 1).
pub fn declare_calibration(b: &mut ParamBuilder, mid: usize) -> Result<()> {
    b.conv("cal.c1", 1, mid, 3, true)?;
    b.conv("cal.c2", mid, 1, 1, true)
}

pub fn calibration_params(seed: u64) -> Result<ParamBundle> {
    let mut b = ParamBuilder::new(seed);
    declare_calibration(&mut b, CALIBRATION_MID_CHANNELS)?;
    Ok(b.finish())
}

/// Largest double below one; calibrated values are clamped into
/// `[f64::MIN_POSITIVE, ALMOST_ONE]` so they stay strictly inside `(0, 1)`.
const ALMOST_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// `sigmoid(conv1x1(relu(conv3x3(d))))`, strictly inside `(0, 1)`.
pub fn calibrate_density_on(tape: &mut Tape, d: Var, p: &Bound) -> Result<Var> {
    let w1 = p.var("cal.c1.w")?;
    let b1 = p.var("cal.c1.b")?;
    let w2 = p.var("cal.c2.w")?;
    let b2 = p.var("cal.c2.b")?;
    let h = tape.conv2d(d, w1, Some(b1), 1, 1)?;
    let h = tape.relu(h);
    let logits = tape.conv2d(h, w2, Some(b2), 1, 0)?;
    let s = tape.sigmoid(logits);
    Ok(tape.clamp(s, f64::MIN_POSITIVE, ALMOST_ONE))
}

pub fn calibrate_density(d: &DensityMap, params: &ParamBundle) -> Result<DensityMap> {
    let mut tape = Tape::new();
    let p = tape.bind(params, false);
    let x = tape.constant(d.values().clone());
    let y = calibrate_density_on(&mut tape, x, &p)?;
    DensityMap::new(tape.value(y).clone())
}
