//! Dual-filter fusion: pooled paths whose DCT spectra are split by
//! density-driven masks, recombined through channel and spatial gating and a
//! density-weighted channel affinity, then summed with a 3x3 path.
//!
//! Parameter names (prefix `dffm`), path `i` indexing the kernel list:
//! - `dffm.p{i}.low.w` `[1, C, 1, 1]`, `dffm.p{i}.low.b` `[1]`: mask projector
//! - `dffm.p{i}.ca.*`, `dffm.p{i}.sa.*`: channel and spatial attention
//! - `dffm.p{i}.wh`, `dffm.p{i}.wl` `[C, C]`: cross projectors
//! - `dffm.conv3` `[C, C, 3, 3]` plus bias, `dffm.agg` `[C, C, 1, 1]` plus bias
//!
//! plus the calibration parameters `cal.*` shared by every path.

use serde::{Deserialize, Serialize};

use crate::attention::{
    channel_attention_on, declare_channel_attention, declare_spatial_attention, spatial_attention_on,
    DEFAULT_REDUCTION, DEFAULT_SPATIAL_KERNEL,
};
use crate::autodiff::{Bound, Tape, Var};
use crate::density::{calibrate_density_on, declare_calibration, DensityMap, CALIBRATION_MID_CHANNELS};
use crate::error::{invalid, Result};
use crate::params::{ParamBuilder, ParamBundle};
use crate::tensor::Tensor;

pub const DEFAULT_KERNELS: [usize; 3] = [3, 6, 9];

/// Kernel configurations compared in the ablation over pooling sizes.
pub const KERNEL_TABLE: [&[usize]; 8] = [
    &[3, 5, 7],
    &[5, 7, 9],
    &[3, 6, 9],
    &[6, 9, 12],
    &[6, 7, 8],
    &[6, 7, 8, 9],
    &[3, 5, 7, 9],
    &[3, 6, 9, 12],
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DffmConfig {
    pub channels: usize,
    pub kernels: Vec<usize>,
    pub reduction: usize,
    pub spatial_kernel: usize,
}

impl DffmConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            kernels: DEFAULT_KERNELS.to_vec(),
            reduction: DEFAULT_REDUCTION,
            spatial_kernel: DEFAULT_SPATIAL_KERNEL,
        }
    }

    pub fn with_kernels(mut self, kernels: &[usize]) -> Self {
        self.kernels = kernels.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(invalid("channels must be positive"));
        }
        if self.kernels.contains(&0) {
            return Err(invalid("pooling kernels must be positive"));
        }
        if self.spatial_kernel.is_multiple_of(2) {
            return Err(invalid(format!("spatial kernel {} must be odd", self.spatial_kernel)));
        }
        Ok(())
    }

    pub fn declare(&self, b: &mut ParamBuilder) -> Result<()> {
        self.validate()?;
        let c = self.channels;
        for i in 0..self.kernels.len() {
            declare_edh(b, &format!("dffm.p{i}"), c, self.reduction, self.spatial_kernel)?;
        }
        b.conv("dffm.conv3", c, c, 3, true)?;
        b.conv("dffm.agg", c, c, 1, true)?;
        declare_calibration(b, CALIBRATION_MID_CHANNELS)
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamBundle> {
        let mut b = ParamBuilder::new(seed);
        self.declare(&mut b)?;
        Ok(b.finish())
    }
}

pub fn declare_edh(
    b: &mut ParamBuilder,
    prefix: &str,
    c: usize,
    reduction: usize,
    spatial_kernel: usize,
) -> Result<()> {
    b.conv(&format!("{prefix}.low"), c, 1, 1, true)?;
    declare_channel_attention(b, &format!("{prefix}.ca"), c, reduction)?;
    declare_spatial_attention(b, &format!("{prefix}.sa"), spatial_kernel)?;
    b.uniform(&format!("{prefix}.wh"), &[c, c], c)?;
    b.uniform(&format!("{prefix}.wl"), &[c, c], c)
}

/// Spectra of one source split by complementary masks.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyPair {
    pub f_low: Tensor,
    pub f_high: Tensor,
}

fn check_plane(tape: &Tape, x: Var, plane: Var, what: &str) -> Result<()> {
    let (_, h, w) = tape.value(x).chw()?;
    let (pc, ph, pw) = tape.value(plane).chw()?;
    if (pc, ph, pw) != (1, h, w) {
        return Err(invalid(format!(
            "{what} shape {:?} does not match features {:?}",
            tape.value(plane).shape(),
            tape.value(x).shape()
        )));
    }
    Ok(())
}

/// `M_low = sigmoid(conv1x1(P * D))`, `M_high = 1 - M_low`.
pub fn frequency_masks_on(tape: &mut Tape, x: Var, d: Var, p: &Bound, prefix: &str) -> Result<(Var, Var)> {
    check_plane(tape, x, d, "density")?;
    let weighted = tape.mul(x, d)?;
    let w = p.var(&format!("{prefix}.low.w"))?;
    let b = p.var(&format!("{prefix}.low.b"))?;
    let logits = tape.conv2d(weighted, w, Some(b), 1, 0)?;
    let low = tape.sigmoid(logits);
    let high = tape.one_minus(low);
    Ok((low, high))
}

/// Masks applied to the DCT coefficients of `f`.
pub fn frequency_split_on(tape: &mut Tape, f: Var, m_low: Var, m_high: Var) -> Result<(Var, Var)> {
    check_plane(tape, f, m_low, "low mask")?;
    check_plane(tape, f, m_high, "high mask")?;
    let spec = tape.dct2(f)?;
    let low = tape.mul(spec, m_low)?;
    let high = tape.mul(spec, m_high)?;
    Ok((low, high))
}

/// One enhancement unit on a pooled path. `d_cal` is the calibrated density
/// at the path's resolution.
pub fn edh_on(tape: &mut Tape, x: Var, f_low: Var, f_high: Var, d_cal: Var, p: &Bound, prefix: &str) -> Result<Var> {
    let (c, h, w) = tape.value(x).chw()?;
    check_plane(tape, x, d_cal, "calibrated density")?;
    let l = h * w;
    let low = tape.idct2(f_low)?;
    let high = tape.idct2(f_high)?;
    let f_l = channel_attention_on(tape, low, p, &format!("{prefix}.ca"))?;
    let f_h = spatial_attention_on(tape, high, p, &format!("{prefix}.sa"))?;
    let f_l = tape.reshape(f_l, &[c, l])?;
    let f_h = tape.reshape(f_h, &[c, l])?;
    let fg = tape.reshape(d_cal, &[1, l])?;
    let bg = tape.one_minus(fg);
    let wh = p.var(&format!("{prefix}.wh"))?;
    let wl = p.var(&format!("{prefix}.wl"))?;
    let gh = tape.matmul(wh, f_h)?;
    let gh = tape.mul(gh, fg)?;
    let gl = tape.matmul(wl, f_l)?;
    let gl = tape.mul(gl, bg)?;
    let glt = tape.transpose(gl)?;
    let scores = tape.matmul(gh, glt)?;
    let a = tape.softmax(scores, 1)?;
    let xf = tape.reshape(x, &[c, l])?;
    let mixed = tape.matmul(a, xf)?;
    let mixed = tape.reshape(mixed, &[c, h, w])?;
    tape.add(mixed, d_cal)
}

/// Handles of one path, kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct PathTrace {
    pub kernel: usize,
    pub m_low: Var,
    pub m_high: Var,
    pub f_low: Var,
    pub f_high: Var,
    /// EDH output at full resolution.
    pub h: Var,
}

#[derive(Debug, Clone)]
pub struct DffmTrace {
    pub out: Var,
    pub paths: Vec<PathTrace>,
    pub conv_path: Var,
}

/// Full fusion on `x` `[C, H, W]` with a raw density map `d` `[1, H', W']`.
pub fn dffm_forward_on(tape: &mut Tape, x: Var, d: Var, p: &Bound, cfg: &DffmConfig) -> Result<DffmTrace> {
    cfg.validate()?;
    let (c, h, w) = tape.value(x).chw()?;
    if c != cfg.channels {
        return Err(invalid(format!("expected {} channels, got {c}", cfg.channels)));
    }
    if let Some(&k) = cfg.kernels.iter().find(|&&k| k > h.min(w)) {
        return Err(invalid(format!("pooling kernel {k} exceeds the {h}x{w} input")));
    }
    if tape.value(d).chw()?.0 != 1 {
        return Err(invalid("density must have one channel"));
    }
    let d_full = tape.resize(d, h, w)?;
    let d_cal = calibrate_density_on(tape, d_full, p)?;

    let mut paths = Vec::with_capacity(cfg.kernels.len());
    for (i, &k) in cfg.kernels.iter().enumerate() {
        let prefix = format!("dffm.p{i}");
        let pooled = tape.avg_pool(x, k, k)?;
        let (_, ph, pw) = tape.value(pooled).chw()?;
        let d_k = tape.resize(d_full, ph, pw)?;
        let cal_k = tape.resize(d_cal, ph, pw)?;
        let (m_low, m_high) = frequency_masks_on(tape, pooled, d_k, p, &prefix)?;
        let (f_low, f_high) = frequency_split_on(tape, pooled, m_low, m_high)?;
        let e = edh_on(tape, pooled, f_low, f_high, cal_k, p, &prefix)?;
        let up = tape.resize(e, h, w)?;
        paths.push(PathTrace {
            kernel: k,
            m_low,
            m_high,
            f_low,
            f_high,
            h: up,
        });
    }
    let conv_path = tape.conv2d(x, p.var("dffm.conv3.w")?, Some(p.var("dffm.conv3.b")?), 1, 1)?;
    let mut total = conv_path;
    for path in paths.iter().rev() {
        total = tape.add(path.h, total)?;
    }
    let out = tape.conv2d(total, p.var("dffm.agg.w")?, Some(p.var("dffm.agg.b")?), 1, 0)?;
    Ok(DffmTrace { out, paths, conv_path })
}

#[derive(Debug, Clone)]
pub struct DffmOutput {
    pub out: Tensor,
    /// Per-path EDH outputs resized to the input resolution.
    pub paths: Vec<(usize, Tensor)>,
    pub macs: u64,
}

pub fn dffm_forward(x: &Tensor, d: &DensityMap, params: &ParamBundle, cfg: &DffmConfig) -> Result<DffmOutput> {
    let mut tape = Tape::new();
    let p = tape.bind(params, false);
    let xv = tape.constant(x.clone());
    let dv = tape.constant(d.values().clone());
    let trace = dffm_forward_on(&mut tape, xv, dv, &p, cfg)?;
    Ok(DffmOutput {
        out: tape.value(trace.out).clone(),
        paths: trace
            .paths
            .iter()
            .map(|t| (t.kernel, tape.value(t.h).clone()))
            .collect(),
        macs: tape.macs(),
    })
}

/// Masks for features `x` and a density already at their resolution.
pub fn frequency_masks(x: &Tensor, d: &DensityMap, params: &ParamBundle, prefix: &str) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let p = tape.bind(params, false);
    let xv = tape.constant(x.clone());
    let dv = tape.constant(d.values().clone());
    let (lo, hi) = frequency_masks_on(&mut tape, xv, dv, &p, prefix)?;
    Ok((tape.value(lo).clone(), tape.value(hi).clone()))
}

pub fn frequency_split(f: &Tensor, m_low: &Tensor, m_high: &Tensor) -> Result<FrequencyPair> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let lo = tape.constant(m_low.clone());
    let hi = tape.constant(m_high.clone());
    let (a, b) = frequency_split_on(&mut tape, fv, lo, hi)?;
    Ok(FrequencyPair {
        f_low: tape.value(a).clone(),
        f_high: tape.value(b).clone(),
    })
}

/// EDH on `x` with the given spectra and calibrated density (same resolution).
pub fn edh(x: &Tensor, pair: &FrequencyPair, d_cal: &DensityMap, params: &ParamBundle, prefix: &str) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = tape.bind(params, false);
    let xv = tape.constant(x.clone());
    let lo = tape.constant(pair.f_low.clone());
    let hi = tape.constant(pair.f_high.clone());
    let dv = tape.constant(d_cal.values().clone());
    let out = edh_on(&mut tape, xv, lo, hi, dv, &p, prefix)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{conv2d, dct2};
    use crate::rng::SplitMix64;

    fn seeded(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0)).unwrap()
    }

    fn seeded_density(h: usize, w: usize, seed: u64) -> DensityMap {
        DensityMap::new(seeded(&[1, h, w], seed).map(f64::abs)).unwrap()
    }

    #[test]
    fn zero_projector_gives_half_masks() {
        let cfg = DffmConfig::new(3);
        let p = cfg.init_params(1).unwrap().zeroed();
        let (lo, hi) = frequency_masks(&seeded(&[3, 5, 4], 2), &seeded_density(5, 4, 3), &p, "dffm.p0").unwrap();
        assert!(lo.data().iter().all(|&v| v == 0.5));
        assert!(hi.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_density_gives_bias_mask() {
        let cfg = DffmConfig::new(3);
        let mut p = cfg.init_params(1).unwrap();
        p.insert("dffm.p0.low.b", Tensor::new(vec![1], vec![0.3]).unwrap());
        let (lo, hi) =
            frequency_masks(&seeded(&[3, 5, 4], 2), &DensityMap::zeros(5, 4).unwrap(), &p, "dffm.p0").unwrap();
        let expected = 1.0 / (1.0 + (-0.3f64).exp());
        assert!(lo.data().iter().all(|&v| (v - expected).abs() < 1e-15));
        for (a, b) in lo.data().iter().zip(hi.data()) {
            assert_eq!(a + b, 1.0);
        }
    }

    #[test]
    fn unit_low_mask_keeps_whole_spectrum() {
        let f = seeded(&[2, 4, 6], 4);
        let pair = frequency_split(
            &f,
            &Tensor::ones(&[1, 4, 6]).unwrap(),
            &Tensor::zeros(&[1, 4, 6]).unwrap(),
        )
        .unwrap();
        assert_eq!(pair.f_low, dct2(&f).unwrap());
        assert!(pair.f_high.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_cross_projectors_average_channels() {
        let c = 3;
        let cfg = DffmConfig::new(c);
        let mut p = cfg.init_params(5).unwrap();
        p.insert("dffm.p0.wh", Tensor::zeros(&[c, c]).unwrap());
        p.insert("dffm.p0.wl", Tensor::zeros(&[c, c]).unwrap());
        let x = seeded(&[c, 4, 4], 6);
        let d_cal = DensityMap::new(Tensor::filled(&[1, 4, 4], 0.25).unwrap()).unwrap();
        let spec = dct2(&x).unwrap();
        let pair = FrequencyPair {
            f_low: spec.clone(),
            f_high: spec.map(|_| 0.0),
        };
        let out = edh(&x, &pair, &d_cal, &p, "dffm.p0").unwrap();
        for i in 0..16 {
            let mean = (0..c).map(|ch| x.data()[ch * 16 + i]).sum::<f64>() / c as f64;
            for ch in 0..c {
                assert!((out.data()[ch * 16 + i] - (mean + 0.25)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn empty_kernel_set_is_conv_path() {
        let cfg = DffmConfig::new(2).with_kernels(&[]);
        let p = cfg.init_params(8).unwrap();
        let x = seeded(&[2, 6, 6], 9);
        let out = dffm_forward(&x, &seeded_density(6, 6, 10), &p, &cfg).unwrap();
        let c3 = conv2d(
            &x,
            p.get("dffm.conv3.w").unwrap(),
            Some(p.get("dffm.conv3.b").unwrap()),
            1,
            1,
        )
        .unwrap();
        let expected = conv2d(
            &c3,
            p.get("dffm.agg.w").unwrap(),
            Some(p.get("dffm.agg.b").unwrap()),
            1,
            0,
        )
        .unwrap();
        assert_eq!(out.out, expected);
        assert!(out.paths.is_empty());
    }

    #[test]
    fn shape_and_kernel_errors() {
        let cfg = DffmConfig::new(3);
        let p = cfg.init_params(2).unwrap();
        let x = seeded(&[3, 36, 36], 3);
        let out = dffm_forward(&x, &seeded_density(36, 36, 4), &p, &cfg).unwrap();
        assert_eq!(out.out.shape(), x.shape());
        assert_eq!(out.paths.len(), 3);
        assert!(out.out.all_finite());

        let small = seeded(&[3, 8, 12], 5);
        assert!(dffm_forward(&small, &seeded_density(8, 12, 6), &p, &cfg).is_err());
        assert!(dffm_forward(&seeded(&[2, 36, 36], 3), &seeded_density(36, 36, 4), &p, &cfg).is_err());
    }

    #[test]
    fn density_at_other_resolution_is_resized() {
        let cfg = DffmConfig::new(2).with_kernels(&[3]);
        let p = cfg.init_params(2).unwrap();
        let x = seeded(&[2, 12, 12], 3);
        let out = dffm_forward(&x, &seeded_density(24, 24, 4), &p, &cfg).unwrap();
        assert_eq!(out.out.shape(), x.shape());
    }
}
