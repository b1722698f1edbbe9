//! Finite-difference checks of every differentiable op and of the composed
//! module graphs on micro shapes.
//!
//! Op-level checks reduce each output to a scalar through a fixed random
//! weighting so every output coordinate contributes a distinct cotangent.

use std::fmt;
use std::str::FromStr;

use crate::attention::{
    channel_attention_on, declare_channel_attention, declare_spatial_attention, spatial_attention_on,
};
use crate::autodiff::{grad_check, grad_check_bundle, GradCheckReport, Tape, Var};
use crate::dafm::{dafm_mask, dafm_with_mask_on, DafmConfig};
use crate::density::{
    calibrate_density_on, calibration_params, dgb_forward_on, gt_density, BBoxAnnotation, DensityMap, DgbConfig,
};
use crate::dffm::{dffm_forward_on, DffmConfig};
use crate::error::{invalid, Result};
use crate::params::{ParamBuilder, ParamBundle};
use crate::region::{focus_bank_on, BinaryMask, Threshold};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradModule {
    Ops,
    Density,
    Dafm,
    Dffm,
    All,
}

impl GradModule {
    pub const NAMES: [&'static str; 5] = ["ops", "density", "dafm", "dffm", "all"];
}

impl FromStr for GradModule {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Self::Ops),
            "density" => Ok(Self::Density),
            "dafm" => Ok(Self::Dafm),
            "dffm" => Ok(Self::Dffm),
            "all" => Ok(Self::All),
            other => Err(invalid(format!(
                "unknown module `{other}`, expected one of {:?}",
                Self::NAMES
            ))),
        }
    }
}

impl fmt::Display for GradModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = [Self::Ops, Self::Density, Self::Dafm, Self::Dffm, Self::All]
            .iter()
            .position(|m| m == self)
            .expect("listed");
        f.write_str(Self::NAMES[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedCheck {
    pub name: String,
    pub report: GradCheckReport,
}

impl NamedCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.report.max_rel_error < tol
    }
}

pub fn seeded(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0)).expect("valid shape")
}

/// `sum(y * R)` with `R` uniform in `[-1, 1]` from `seed`.
pub fn readout(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let r = tape.constant(seeded(tape.value(y).shape(), seed));
    let weighted = tape.mul(y, r)?;
    Ok(tape.sum(weighted))
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

/// Differentiable ops with their input shapes.
fn op_table() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("add", vec![vec![2, 3, 4], vec![2, 1, 4]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![2, 3, 4], vec![1, 3, 1]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![2, 3, 4], vec![1, 3, 1]], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![vec![3, 4]], |t, v| Ok(t.scale(v[0], -1.7))),
        ("add_scalar", vec![vec![3, 4]], |t, v| Ok(t.add_scalar(v[0], 0.3))),
        ("one_minus", vec![vec![1, 3, 4]], |t, v| Ok(t.one_minus(v[0]))),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("transpose", vec![vec![3, 5]], |t, v| t.transpose(v[0])),
        ("reshape", vec![vec![2, 3, 4]], |t, v| t.reshape(v[0], &[6, 4])),
        ("conv2d", vec![vec![2, 5, 6], vec![3, 2, 3, 3], vec![3]], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 2, 1)
        }),
        ("conv2d_1x1", vec![vec![3, 4, 4], vec![2, 3, 1, 1]], |t, v| {
            t.conv2d(v[0], v[1], None, 1, 0)
        }),
        ("depthwise_conv", vec![vec![3, 5, 5], vec![3, 1, 3, 3]], |t, v| {
            t.depthwise_conv(v[0], v[1])
        }),
        (
            "depthwise_separable_conv",
            vec![vec![3, 6, 6], vec![3, 1, 3, 3], vec![4, 3, 1, 1]],
            |t, v| t.depthwise_separable_conv(v[0], v[1], v[2]),
        ),
        ("avg_pool", vec![vec![2, 5, 7]], |t, v| t.avg_pool(v[0], 3, 2)),
        ("resize_up", vec![vec![2, 3, 4]], |t, v| t.resize(v[0], 5, 7)),
        ("resize_down", vec![vec![1, 6, 6]], |t, v| t.resize(v[0], 4, 3)),
        ("dct2", vec![vec![2, 4, 5]], |t, v| t.dct2(v[0])),
        ("idct2", vec![vec![2, 5, 3]], |t, v| t.idct2(v[0])),
        ("sigmoid", vec![vec![3, 4]], |t, v| Ok(t.sigmoid(v[0]))),
        ("relu", vec![vec![3, 4]], |t, v| Ok(t.relu(v[0]))),
        ("clamp", vec![vec![3, 4]], |t, v| Ok(t.clamp(v[0], -0.5, 0.5))),
        ("softmax_rows", vec![vec![3, 4]], |t, v| t.softmax(v[0], 1)),
        ("softmax_cols", vec![vec![3, 4]], |t, v| t.softmax(v[0], 0)),
        ("sum", vec![vec![2, 3]], |t, v| {
            let s = t.sum(v[0]);
            Ok(t.scale(s, 0.7))
        }),
        ("mean", vec![vec![2, 3]], |t, v| Ok(t.mean(v[0]))),
        ("channel_mean", vec![vec![3, 2, 4]], |t, v| t.channel_mean(v[0])),
        ("channel_max", vec![vec![3, 2, 4]], |t, v| t.channel_max(v[0])),
        ("spatial_mean", vec![vec![3, 2, 4]], |t, v| t.spatial_mean(v[0])),
        ("concat", vec![vec![1, 3, 3], vec![2, 3, 3]], |t, v| {
            t.concat(&[v[0], v[1]])
        }),
        ("select_rows", vec![vec![5, 3]], |t, v| t.select_rows(v[0], &[4, 0, 4])),
        ("mse", vec![vec![1, 4, 4], vec![1, 4, 4]], |t, v| t.mse(v[0], v[1])),
    ]
}

/// Every tape op at one seeded point.
pub fn op_checks(seed: u64, eps: f64) -> Result<Vec<NamedCheck>> {
    let mut out = Vec::new();
    for (i, (name, shapes, f)) in op_table().into_iter().enumerate() {
        let base = seed.wrapping_mul(1_000).wrapping_add(i as u64 * 10);
        let point: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(j, s)| seeded(s, base + j as u64))
            .collect();
        let report = grad_check(
            |tape, vars| {
                let y = f(tape, vars)?;
                readout(tape, y, base + 9)
            },
            &point,
            eps,
            seed,
        )?;
        out.push(NamedCheck {
            name: name.to_string(),
            report,
        });
    }
    out.extend(attention_checks(seed, eps)?);
    Ok(out)
}

fn with_input(mut bundle: ParamBundle, name: &str, t: Tensor) -> ParamBundle {
    bundle.insert(name, t);
    bundle
}

fn attention_checks(seed: u64, eps: f64) -> Result<Vec<NamedCheck>> {
    let mut b = ParamBuilder::new(seed);
    declare_channel_attention(&mut b, "ca", 4, 2)?;
    declare_spatial_attention(&mut b, "sa", 3)?;
    b.conv("bank", 3, 2, 1, true)?;
    let params = b.finish();
    let x4 = seeded(&[4, 5, 6], seed + 101);
    let x3 = seeded(&[3, 9, 9], seed + 102);
    let mask = BinaryMask::from_fn(9, 9, |r, c| (2..6).contains(&r) && c >= 3)?;

    let ca = grad_check_bundle(
        |t, p| {
            let y = channel_attention_on(t, p.var("x")?, p, "ca")?;
            readout(t, y, seed + 103)
        },
        &with_input(params.subset("ca"), "x", x4.clone()),
        eps,
        seed,
    )?;
    let sa = grad_check_bundle(
        |t, p| {
            let y = spatial_attention_on(t, p.var("x")?, p, "sa")?;
            readout(t, y, seed + 104)
        },
        &with_input(params.subset("sa"), "x", x4),
        eps,
        seed,
    )?;
    let bank = grad_check_bundle(
        |t, p| {
            let m = t.constant(mask.values().clone());
            let y = focus_bank_on(t, p.var("x")?, m, p, "bank")?;
            readout(t, y, seed + 105)
        },
        &with_input(params.subset("bank"), "x", x3),
        eps,
        seed,
    )?;
    Ok(vec![
        NamedCheck {
            name: "channel_attention".into(),
            report: ca,
        },
        NamedCheck {
            name: "spatial_attention".into(),
            report: sa,
        },
        NamedCheck {
            name: "focus_bank".into(),
            report: bank,
        },
    ])
}

/// A few boxes on a `size`-square image.
fn micro_boxes(size: usize, seed: u64) -> Vec<BBoxAnnotation> {
    let mut rng = SplitMix64::new(seed);
    (0..3)
        .map(|_| {
            let w = rng.uniform(2.0, 5.0);
            let h = rng.uniform(2.0, 5.0);
            let x = rng.uniform(0.0, size as f64 - w);
            let y = rng.uniform(0.0, size as f64 - h);
            BBoxAnnotation::from_xywh(1, 1, [x, y, w, h])
        })
        .collect()
}

fn micro_density(size: usize, seed: u64) -> Result<DensityMap> {
    Ok(gt_density(&micro_boxes(size, seed), size, size)?.map)
}

/// Density loss on 8x8 maps, the density branch trained against it, and the
/// calibration head.
pub fn density_checks(seed: u64, eps: f64) -> Result<Vec<NamedCheck>> {
    let target = micro_density(8, seed)?;
    let loss = grad_check(
        |t, v| {
            let gt = t.constant(target.values().clone());
            t.mse(v[0], gt)
        },
        &[seeded(&[1, 8, 8], seed + 1).map(|v| 0.05 * v.abs())],
        eps,
        seed,
    )?;

    let cfg = DgbConfig {
        encoder_stages: 2,
        decoder_stages: 2,
        base_channels: 4,
        ..DgbConfig::default()
    };
    let target16 = micro_density(16, seed + 2)?;
    let image = seeded(&[1, 16, 16], seed + 3);
    let dgb = grad_check_bundle(
        |t, p| {
            let x = t.constant(image.clone());
            let gt = t.constant(target16.values().clone());
            let pred = dgb_forward_on(t, x, p, &cfg)?;
            t.mse(pred, gt)
        },
        &cfg.init_params(seed)?,
        eps,
        seed,
    )?;

    let raw = micro_density(8, seed + 4)?.into_tensor().map(|v| 20.0 * v);
    let cal = grad_check_bundle(
        |t, p| {
            let y = calibrate_density_on(t, p.var("d")?, p)?;
            readout(t, y, seed + 5)
        },
        &with_input(calibration_params(seed)?, "d", raw),
        eps,
        seed,
    )?;
    Ok(vec![
        NamedCheck {
            name: "density_loss".into(),
            report: loss,
        },
        NamedCheck {
            name: "dgb_density_loss".into(),
            report: dgb,
        },
        NamedCheck {
            name: "calibrate_density".into(),
            report: cal,
        },
    ])
}

/// Focusing module with a frozen refined mask, w.r.t. its input and every
/// parameter.
pub fn dafm_check(seed: u64, eps: f64) -> Result<NamedCheck> {
    let cfg = DafmConfig {
        max_agents: 8,
        threshold: Threshold::Quantile(0.2),
        ..DafmConfig::new(3, 3)
    };
    let x = seeded(&[3, 14, 14], seed + 1);
    let (mask, _) = dafm_mask(&micro_density(14, seed + 2)?, 14, 14, cfg.threshold)?;
    let report = grad_check_bundle(
        |t, p| {
            let tr = dafm_with_mask_on(t, p.var("x")?, &mask, p, &cfg)?;
            readout(t, tr.out, seed + 3)
        },
        &with_input(cfg.init_params(seed)?, "x", x),
        eps,
        seed,
    )?;
    Ok(NamedCheck {
        name: "dafm_forward".into(),
        report,
    })
}

/// Fusion module (C = 4, 12x12, kernels 3, 6, 9) w.r.t. its input and every
/// parameter.
pub fn dffm_check(seed: u64, eps: f64) -> Result<NamedCheck> {
    let cfg = DffmConfig::new(4);
    let x = seeded(&[4, 12, 12], seed + 1);
    let d = micro_density(12, seed + 2)?.into_tensor().map(|v| 10.0 * v);
    let report = grad_check_bundle(
        |t, p| {
            let dv = t.constant(d.clone());
            let tr = dffm_forward_on(t, p.var("x")?, dv, p, &cfg)?;
            readout(t, tr.out, seed + 3)
        },
        &with_input(cfg.init_params(seed)?, "x", x),
        eps,
        seed,
    )?;
    Ok(NamedCheck {
        name: "dffm_forward".into(),
        report,
    })
}

pub fn run_module(module: GradModule, seed: u64, eps: f64) -> Result<Vec<NamedCheck>> {
    Ok(match module {
        GradModule::Ops => op_checks(seed, eps)?,
        GradModule::Density => density_checks(seed, eps)?,
        GradModule::Dafm => vec![dafm_check(seed, eps)?],
        GradModule::Dffm => vec![dffm_check(seed, eps)?],
        GradModule::All => {
            let mut all = op_checks(seed, eps)?;
            all.extend(density_checks(seed, eps)?);
            all.push(dafm_check(seed, eps)?);
            all.push(dffm_check(seed, eps)?);
            all
        }
    })
}
