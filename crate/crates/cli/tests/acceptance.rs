//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero when any
//! criterion fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use support::{naive_dct2, naive_idct2, region_reference, report_reference};
use tinydense_core::dafm::{dafm_forward, global_attention, DafmConfig};
use tinydense_core::density::gt_density;
use tinydense_core::dffm::{dffm_forward, frequency_masks, frequency_split, DffmConfig, KERNEL_TABLE};
use tinydense_core::eval::{ap_report, AreaBucket, DEFAULT_MAX_DETS};
use tinydense_core::gradcheck::{run_module, seeded, GradModule, DEFAULT_EPS, TOLERANCE};
use tinydense_core::ops::{dct2, idct2};
use tinydense_core::region::{refine_mask, BinaryMask, Threshold};
use tinydense_core::synth::{generate_scene, perturb_detections, SceneSpec};
use tinydense_core::train::{train_demo, TrainConfig};
use tinydense_core::{BBoxAnnotation, DensityMap, Detection, SplitMix64, Tensor};

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn exhaustive_refinement() -> Verdict {
    let start = Instant::now();
    for bits in 0u32..1 << 16 {
        let flags: Vec<bool> = (0..16).map(|i| bits >> i & 1 == 1).collect();
        let mask = BinaryMask::from_fn(4, 4, |r, c| flags[r * 4 + c]).unwrap();
        let (refined, regions) = refine_mask(&mask).unwrap();
        let (want_mask, want_rects) = region_reference(&flags, 4, 4);
        let got_mask: Vec<bool> = (0..16).map(|i| refined.get(i / 4, i % 4)).collect();
        let got_rects: Vec<_> = regions
            .rects
            .iter()
            .map(|r| {
                let r = r.one_based();
                (r.r_min, r.r_max, r.c_min, r.c_max)
            })
            .collect();
        check(got_mask == want_mask, format!("mask {bits:#06x}: refined mask differs"))?;
        check(
            got_rects == want_rects,
            format!("mask {bits:#06x}: rectangles {got_rects:?} vs {want_rects:?}"),
        )?;
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!("65536 masks exact in {:.2?}", elapsed))
}

fn dct_suite() -> Verdict {
    let shapes = [(1, 1), (1, 7), (3, 5), (8, 8), (17, 4), (13, 29), (16, 32), (32, 32)];
    let (mut round, mut parseval, mut oracle) = (0f64, 0f64, 0f64);
    for (i, &(h, w)) in shapes.iter().enumerate() {
        let x = seeded(&[3, h, w], 100 + i as u64).map(|v| 10.0 * v);
        let f = dct2(&x).unwrap();
        round = round
            .max(idct2(&f).unwrap().max_abs_diff(&x))
            .max(dct2(&idct2(&x).unwrap()).unwrap().max_abs_diff(&x));
        parseval = parseval.max((f.sq_norm() - x.sq_norm()).abs() / x.sq_norm());
        oracle = oracle
            .max(f.max_abs_diff(&naive_dct2(&x)))
            .max(idct2(&x).unwrap().max_abs_diff(&naive_idct2(&x)));
    }
    let detail = format!("round trip {round:.1e}, Parseval {parseval:.1e}, definition {oracle:.1e}");
    check(round < 1e-9 && parseval < 1e-12 && oracle < 1e-9, detail.clone())?;
    Ok(detail)
}

fn frequency_conservation() -> Verdict {
    let mut worst_spec: f64 = 0.0;
    let mut worst_space: f64 = 0.0;
    for case in 0..20u64 {
        let (c, h, w) = (
            1 + case as usize % 4,
            4 + case as usize % 9,
            5 + (3 * case as usize) % 11,
        );
        let x = seeded(&[c, h, w], 300 + case).map(|v| 4.0 * v);
        let d = DensityMap::new(seeded(&[1, h, w], 400 + case).map(|v| 3.0 * v.abs())).unwrap();
        let params = DffmConfig::new(c).init_params(500 + case).unwrap();
        let (lo, hi) = frequency_masks(&x, &d, &params, "dffm.p0").unwrap();
        let exact = lo.data().iter().zip(hi.data()).all(|(a, b)| a + b == 1.0);
        check(exact, format!("case {case}: masks do not sum to exactly 1"))?;
        let pair = frequency_split(&x, &lo, &hi).unwrap();
        let sum = pair.f_low.zip_map(&pair.f_high, |a, b| a + b).unwrap();
        worst_spec = worst_spec.max(sum.max_abs_diff(&dct2(&x).unwrap()));
        let back = idct2(&pair.f_low)
            .unwrap()
            .zip_map(&idct2(&pair.f_high).unwrap(), |a, b| a + b)
            .unwrap();
        worst_space = worst_space.max(back.max_abs_diff(&x));
    }
    let detail = format!("20 cases, spectrum {worst_spec:.1e}, spatial {worst_space:.1e}");
    check(worst_spec < 1e-9 && worst_space < 1e-9, detail.clone())?;
    Ok(detail)
}

fn gradient_checks() -> Verdict {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut count = 0;
    let mut worst: f64 = 0.0;
    for seed in [1, 2, 3] {
        for c in run_module(GradModule::All, seed, DEFAULT_EPS).unwrap() {
            count += 1;
            worst = worst.max(c.report.max_rel_error);
            if !c.passed(TOLERANCE) {
                failures.push(format!(
                    "{}@{seed} {:.1e} (analytic {:.2e}, numeric {:.2e})",
                    c.name, c.report.max_rel_error, c.report.worst_values.0, c.report.worst_values.1
                ));
            }
        }
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(300), format!("took {elapsed:?}"))?;
    check(
        failures.is_empty(),
        format!(
            "{} of {count} checks above {TOLERANCE:e}: {}",
            failures.len(),
            failures.join("; ")
        ),
    )?;
    Ok(format!("{count} checks, max rel error {worst:.1e} in {elapsed:.2?}"))
}

fn interior_box(rng: &mut SplitMix64, size: usize) -> BBoxAnnotation {
    loop {
        let w = rng.uniform(1.0, 16.0);
        let h = rng.uniform(1.0, 16.0);
        let gamma = 0.5 * (w * w + h * h).sqrt();
        if !(2.0..=8.0).contains(&gamma) {
            continue;
        }
        let r = (3.0 * gamma).ceil() + 1.0;
        let cx = rng.uniform(r, size as f64 - r);
        let cy = rng.uniform(r, size as f64 - r);
        return BBoxAnnotation::from_xywh(1, 1, [cx - w / 2.0, cy - h / 2.0, w, h]);
    }
}

fn density_mass() -> Verdict {
    let mut rng = SplitMix64::new(11);
    let mut lo_single = f64::INFINITY;
    let mut hi_single = f64::NEG_INFINITY;
    for _ in 0..500 {
        let s = gt_density(&[interior_box(&mut rng, 64)], 64, 64).unwrap().map.sum();
        lo_single = lo_single.min(s);
        hi_single = hi_single.max(s);
    }
    check(
        (0.985..=1.001).contains(&lo_single) && (0.985..=1.001).contains(&hi_single),
        format!("single-object mass in [{lo_single}, {hi_single}]"),
    )?;
    for n in 1..=20usize {
        for _ in 0..5 {
            let boxes: Vec<_> = (0..n).map(|_| interior_box(&mut rng, 64)).collect();
            let s = gt_density(&boxes, 64, 64).unwrap().map.sum();
            let nf = n as f64;
            check(
                (0.985 * nf..=1.001 * nf).contains(&s),
                format!("{n} objects sum to {s}"),
            )?;
        }
    }
    // coordinates on a 1/16 pixel grid so integer shifts are exact
    for case in 0..50 {
        let boxes: Vec<[f64; 4]> = (0..1 + case % 5)
            .map(|_| {
                let q = |rng: &mut SplitMix64, lo: u64, hi: u64| rng.range_inclusive(lo, hi) as f64 / 16.0;
                [
                    q(&mut rng, 64, 320),
                    q(&mut rng, 64, 320),
                    q(&mut rng, 16, 96),
                    q(&mut rng, 16, 96),
                ]
            })
            .collect();
        let (dx, dy) = (rng.range_inclusive(0, 11) as usize, rng.range_inclusive(0, 11) as usize);
        let render = |sx: f64, sy: f64| {
            let anns: Vec<_> = boxes
                .iter()
                .map(|b| BBoxAnnotation::from_xywh(1, 1, [b[0] + sx, b[1] + sy, b[2], b[3]]))
                .collect();
            gt_density(&anns, 64, 64).unwrap().map.into_tensor()
        };
        let base = render(0.0, 0.0);
        let moved = render(dx as f64, dy as f64);
        for y in 0..40 {
            for x in 0..40 {
                let (a, b) = (moved.at3(0, y + dy, x + dx), base.at3(0, y, x));
                check(
                    a.to_bits() == b.to_bits(),
                    format!("case {case}: shift ({dx},{dy}) changes ({y},{x})"),
                )?;
            }
        }
    }
    Ok(format!(
        "single objects in [{lo_single:.4}, {hi_single:.4}], 100 scenes with n <= 20, 50 shifts bit-exact"
    ))
}

/// IFAM multiply-adds and agent count at one size.
fn focused_macs(x: &Tensor, d: &DensityMap, threshold: Threshold) -> (u64, usize) {
    let mut cfg = DafmConfig::new(32, 32);
    cfg.threshold = threshold;
    let params = cfg.init_params(5).unwrap();
    let out = dafm_forward(x, d, &params, &cfg).unwrap();
    let agents = out.agents.as_ref().map_or(0, |a| a.shape()[0]);
    assert!(agents > 0 && agents <= cfg.max_agents, "{agents} agents");
    (out.ifam_macs, agents)
}

fn compute_reduction() -> Verdict {
    // worst case for the budget: scattered density, every agent slot used
    let x64 = seeded(&[32, 64, 64], 21);
    let scattered = DensityMap::new(seeded(&[1, 64, 64], 22).map(f64::abs)).unwrap();
    let (m64, n64) = focused_macs(&x64, &scattered, Threshold::default());
    let params = DafmConfig::new(32, 32).init_params(5).unwrap();
    let (_, global) = global_attention(&x64, &params).unwrap();
    let share = m64 as f64 / global as f64;

    // scaling with the agent count held fixed by one dense 28x28 patch
    let mut scaled = Vec::new();
    for side in [32usize, 64, 128] {
        let x = seeded(&[32, side, side], 23);
        let patch = Tensor::from_fn(&[1, side, side], |i| f64::from(i / side < 28 && i % side < 28)).unwrap();
        scaled.push(focused_macs(
            &x,
            &DensityMap::new(patch).unwrap(),
            Threshold::Absolute(0.5),
        ));
    }
    check(
        scaled.iter().all(|s| s.1 == scaled[0].1),
        format!("agent counts {scaled:?}"),
    )?;
    let s1 = scaled[1].0 as f64 / (4.0 * scaled[0].0 as f64);
    let s2 = scaled[2].0 as f64 / (4.0 * scaled[1].0 as f64);
    let detail = format!(
        "IFAM {m64} vs global {global} MACs at 64x64 with {n64} agents ({:.1}%), per-pixel ratios {s1:.4} and {s2:.4} with {} agents",
        100.0 * share,
        scaled[0].1
    );
    check(
        share <= 0.25 && (0.95..=1.05).contains(&s1) && (0.95..=1.05).contains(&s2),
        detail.clone(),
    )?;
    Ok(detail)
}

fn eval_case(rng: &mut SplitMix64) -> (Vec<BBoxAnnotation>, Vec<Detection>) {
    let spec = SceneSpec {
        width: 96,
        height: 96,
        n_clusters: 1 + rng.range_inclusive(0, 2) as usize,
        objects_per_cluster: (1, 4),
        object_size: (3, 40),
        cluster_spread: 10.0,
        image_id: 1 + rng.range_inclusive(0, 1),
        category_id: 1 + rng.range_inclusive(0, 1),
        seed: rng.next_u64(),
        ..SceneSpec::default()
    };
    let gts = generate_scene(&spec).unwrap().annotations;
    let mut dets = perturb_detections(&gts, rng.uniform(0.0, 3.0), rng.uniform(0.0, 0.5), 0.3, rng.next_u64()).unwrap();
    // a few unmatched detections, some with tied scores
    for k in 0..rng.range_inclusive(0, 3) {
        let score = if k == 0 { 0.5 } else { rng.next_f64() };
        dets.push(Detection {
            image_id: spec.image_id,
            category_id: spec.category_id,
            bbox: [
                rng.uniform(0.0, 80.0),
                rng.uniform(0.0, 80.0),
                rng.uniform(2.0, 30.0),
                rng.uniform(2.0, 30.0),
            ],
            score,
        });
    }
    (gts, dets)
}

fn evaluator() -> Verdict {
    let mut rng = SplitMix64::new(2024);
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    while cases < 400 {
        let (gts, dets) = eval_case(&mut rng);
        if dets.len() > 12 {
            continue;
        }
        cases += 1;
        let got = ap_report(&dets, &gts, DEFAULT_MAX_DETS).unwrap();
        let (want, counts) = report_reference(&dets, &gts, DEFAULT_MAX_DETS);
        for ((name, g), w) in got.metrics().into_iter().zip(want) {
            worst = worst.max((g - w).abs());
            check((g - w).abs() <= 1e-12, format!("case {cases}: {name} {g} vs {w}"))?;
        }
        check(
            (got.tp, got.fp, got.fn_count) == counts,
            format!(
                "case {cases}: counts {:?} vs {counts:?}",
                (got.tp, got.fp, got.fn_count)
            ),
        )?;
    }

    for seed in 0..20 {
        let spec = SceneSpec {
            width: 128,
            height: 128,
            n_clusters: 3,
            objects_per_cluster: (2, 6),
            object_size: (2, 48),
            seed,
            ..SceneSpec::default()
        };
        let gts = generate_scene(&spec).unwrap().annotations;
        let dets: Vec<Detection> = gts
            .iter()
            .enumerate()
            .map(|(i, g)| Detection {
                image_id: g.image_id,
                category_id: g.category_id,
                bbox: g.to_xywh(),
                score: 1.0 - i as f64 * 1e-3,
            })
            .collect();
        let r = ap_report(&dets, &gts, DEFAULT_MAX_DETS).unwrap();
        for (name, v) in r.metrics() {
            check(
                v == 1.0 || (v == -1.0 && name.starts_with("ap_")),
                format!("perfect detections, seed {seed}: {name} = {v}"),
            )?;
        }
        check(
            r.fp == 0 && r.fn_count == 0,
            format!("perfect detections, seed {seed}: {r:?}"),
        )?;
    }

    let mut areas: Vec<f64> = (0..20_000).map(|i| i as f64 * 0.1).collect();
    areas.extend([0.0, 64.0, 256.0, 1024.0, 64.0 - 1e-9, 256.0 + 1e-9, 1e6]);
    for a in areas {
        let n = AreaBucket::SIZED.into_iter().filter(|b| b.contains(a)).count();
        check(n == 1, format!("area {a} lies in {n} buckets"))?;
    }
    Ok(format!(
        "{cases} cases within {worst:.1e}, perfect detections score 1, buckets partition"
    ))
}

fn kernel_sets() -> Verdict {
    let x = seeded(&[4, 72, 72], 31);
    let d = DensityMap::new(seeded(&[1, 72, 72], 32).map(f64::abs)).unwrap();
    for kernels in KERNEL_TABLE {
        let cfg = DffmConfig::new(4).with_kernels(kernels);
        let params = cfg.init_params(33).map_err(|e| format!("{kernels:?}: {e}"))?;
        let out = dffm_forward(&x, &d, &params, &cfg).map_err(|e| format!("{kernels:?}: {e}"))?;
        check(
            out.out.shape() == x.shape(),
            format!("{kernels:?}: shape {:?}", out.out.shape()),
        )?;
        check(out.out.all_finite(), format!("{kernels:?}: non-finite output"))?;
    }
    Ok(format!("{} configurations on 4x72x72", KERNEL_TABLE.len()))
}

fn train_demo_criterion() -> Verdict {
    let cfg = TrainConfig::default();
    let (a, pa) = train_demo(&cfg).unwrap();
    let (b, pb) = train_demo(&cfg).unwrap();
    check(a == b && pa == pb, "two runs differ")?;
    let drop = 1.0 - a.last() / a.initial();
    let detail = format!(
        "L_dense {:.4e} -> {:.4e} ({:.1}% lower) in {} steps, deterministic",
        a.initial(),
        a.last(),
        100.0 * drop,
        cfg.steps
    );
    check(drop >= 0.5, detail.clone())?;
    Ok(detail)
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tinydense"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    check(
        out.status.success(),
        format!(
            "{args:?} exited {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ),
    )?;
    Ok(out.stdout)
}

fn pipeline(dir: &Path, jobs: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    let g = ["--seed", "42", "--jobs", jobs];
    let steps: [&[&str]; 6] = [
        &["synth", "--spec", "spec.json", "--out-dir", "scene", "--images", "3"],
        &[
            "gt-density",
            "--ann",
            "scene/annotations.json",
            "--out",
            "density.drmt",
            "--heatmap",
            "density.pgm",
        ],
        &[
            "select-regions",
            "--density",
            "density.drmt",
            "--out-mask",
            "mask.drmt",
            "--regions",
            "regions.json",
        ],
        &[
            "dafm",
            "--features",
            "scene/image_42.drmt",
            "--density",
            "density.drmt",
            "--width",
            "4",
            "--out",
            "focused.drmt",
            "--dump-dir",
            "dafm",
        ],
        &[
            "dffm",
            "--features",
            "focused.drmt",
            "--density",
            "density.drmt",
            "--out",
            "fused.drmt",
            "--dump-dir",
            "dffm",
        ],
        &[
            "eval",
            "--gt",
            "scene/annotations.json",
            "--dets",
            "scene/dets.json",
            "--csv",
            "eval.csv",
        ],
    ];
    let spec = r#"{"width": 64, "height": 64, "object_size": [3, 8], "cluster_spread": 6.0, "image_id": 42}"#;
    fs::write(dir.join("spec.json"), spec).map_err(|e| e.to_string())?;
    let mut stdout = Vec::new();
    for s in steps {
        let args: Vec<&str> = g.iter().chain(s.iter()).copied().collect();
        stdout.extend(run_cli(dir, &args)?);
    }
    let mut files = vec![("stdout".to_string(), stdout)];
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in fs::read_dir(&p).map_err(|e| e.to_string())? {
            let path = e.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, fs::read(&path).map_err(|e| e.to_string())?));
            }
        }
    }
    files.sort();
    Ok(files)
}

fn end_to_end() -> Verdict {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = pipeline(a.path(), "1")?;
    let second = pipeline(b.path(), "4")?;
    let names = |v: &[(String, Vec<u8>)]| v.iter().map(|f| f.0.clone()).collect::<Vec<_>>();
    check(names(&first) == names(&second), "runs wrote different file sets")?;
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        check(x == y, format!("{name} differs between runs"))?;
        if name.ends_with(".drmt") {
            let t = tinydense_core::io::decode_tensor(x).map_err(|e| e.to_string())?;
            check(t.all_finite(), format!("{name} holds non-finite values"))?;
        }
    }
    Ok(format!("{} outputs byte-identical across two runs", first.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("exhaustive 4x4 region refinement", exhaustive_refinement),
        ("DCT suite", dct_suite),
        ("frequency conservation", frequency_conservation),
        ("gradient checks", gradient_checks),
        ("density mass and translation", density_mass),
        ("focused attention compute reduction", compute_reduction),
        ("evaluator correctness", evaluator),
        ("kernel-set configurability", kernel_sets),
        ("train-demo", train_demo_criterion),
        ("end-to-end determinism", end_to_end),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match verdict {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
