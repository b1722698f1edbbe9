use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use tinydense_core::dafm::{dafm_forward, DafmConfig};
use tinydense_core::density::{calibrate_density, calibration_params, gt_density, LossWeights};
use tinydense_core::dffm::{dffm_forward, DffmConfig};
use tinydense_core::eval::{ap_report, per_category_ap, DEFAULT_MAX_DETS, DENSE_MAX_DETS};
use tinydense_core::gradcheck::{run_module, GradModule};
use tinydense_core::io::{
    read_annotations, read_detections, read_params, read_tensor, write_annotations, write_detections, write_heatmap,
    write_json_value, write_params, write_tensor, AnnotationFile, Category, ImageInfo,
};
use tinydense_core::region::{select_regions, Rect, Threshold};
use tinydense_core::synth::{generate_scene, perturb_detections, SceneSpec};
use tinydense_core::train::{train_demo, TrainConfig};
use tinydense_core::{DensityMap, Detection, ParamBundle, SplitMix64};

use crate::{
    CalibrateArgs, Cli, Command, DafmArgs, DffmArgs, EvalArgs, Failure, GradcheckArgs, GtDensityArgs,
    SelectRegionsArgs, SynthArgs, ThresholdArgs, TrainDemoArgs,
};

const DEFAULT_SEED: u64 = 7;

type Outcome = std::result::Result<(), Failure>;

pub fn run(cli: &Cli) -> Outcome {
    if cli.jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Failure::Usage(format!("cannot start {} workers: {e}", cli.jobs)))?;
    let seed = cli.seed;
    pool.install(|| match &cli.command {
        Command::Synth(a) => synth(a, seed),
        Command::GtDensity(a) => gt_density_cmd(a),
        Command::Calibrate(a) => calibrate(a, seed.unwrap_or(DEFAULT_SEED)),
        Command::SelectRegions(a) => select(a),
        Command::Dafm(a) => dafm(a, seed.unwrap_or(DEFAULT_SEED)),
        Command::Dffm(a) => dffm(a, seed.unwrap_or(DEFAULT_SEED)),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a, seed.unwrap_or(1)),
        Command::TrainDemo(a) => train(a, seed.unwrap_or(DEFAULT_SEED)),
    })
}

fn ensure_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::Core(e.into()))
}

fn read_density(path: &Path) -> Result<DensityMap, Failure> {
    Ok(DensityMap::new(read_tensor(path)?)?)
}

fn threshold(a: &ThresholdArgs) -> Threshold {
    match (a.absolute, a.quantile) {
        (Some(tau), _) => Threshold::Absolute(tau),
        (None, Some(p)) => Threshold::Quantile(p),
        (None, None) => Threshold::default(),
    }
}

/// Parameters from a file, or freshly initialized from the seed.
fn load_or_init(
    path: Option<&Path>,
    init: impl FnOnce() -> tinydense_core::Result<ParamBundle>,
) -> Result<ParamBundle, Failure> {
    Ok(match path {
        Some(p) => read_params(p)?,
        None => init()?,
    })
}

fn synth(a: &SynthArgs, seed: Option<u64>) -> Outcome {
    if a.images == 0 {
        return Err(Failure::Usage("--images must be at least 1".into()));
    }
    let mut spec: SceneSpec = match &a.spec {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| Failure::Core(e.into()))?;
            serde_json::from_slice(&bytes).map_err(|e| Failure::Core(e.into()))?
        }
        None => SceneSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    ensure_dir(&a.out_dir)?;

    // the first scene uses the scene-spec seed itself, later ones draw from it
    let mut stream = SplitMix64::new(spec.seed);
    let specs: Vec<SceneSpec> = (0..a.images)
        .map(|i| SceneSpec {
            image_id: spec.image_id + i as u64,
            seed: if i == 0 { spec.seed } else { stream.next_u64() },
            ..spec.clone()
        })
        .collect();

    let scenes = specs
        .par_iter()
        .map(|s| {
            let scene = generate_scene(s)?;
            let dets = perturb_detections(&scene.annotations, a.jitter, a.drop, a.score_noise, s.seed ^ 0x5eed)?;
            Ok((s, scene, dets))
        })
        .collect::<tinydense_core::Result<Vec<_>>>()?;

    let mut file = AnnotationFile {
        categories: vec![Category {
            id: spec.category_id,
            name: "object".into(),
        }],
        ..Default::default()
    };
    let mut all_dets: Vec<Detection> = Vec::new();
    for (s, scene, dets) in &scenes {
        let stem = format!("image_{}", s.image_id);
        write_tensor(a.out_dir.join(format!("{stem}.drmt")), &scene.image)?;
        write_heatmap(a.out_dir.join(format!("{stem}.pgm")), &scene.image)?;
        file.images.push(ImageInfo {
            id: s.image_id,
            width: s.width,
            height: s.height,
            file_name: format!("{stem}.drmt"),
        });
        file.push_boxes(&scene.annotations);
        all_dets.extend_from_slice(dets);
        info!(
            "scene {}: {} objects, {} detections",
            s.image_id,
            scene.annotations.len(),
            dets.len()
        );
    }
    write_annotations(a.out_dir.join("annotations.json"), &file)?;
    write_detections(a.out_dir.join("dets.json"), &all_dets)?;
    Ok(())
}

fn gt_density_cmd(a: &GtDensityArgs) -> Outcome {
    let file = read_annotations(&a.ann)?;
    let image = match a.image_id {
        Some(id) => file
            .image(id)
            .ok_or_else(|| Failure::Core(tinydense_core::Error::Annotation(format!("no image with id {id}"))))?,
        None => file.images.first().ok_or_else(|| {
            Failure::Core(tinydense_core::Error::Annotation(
                "annotation file lists no images".into(),
            ))
        })?,
    };
    let boxes = file.boxes_for(image.id)?;
    let g = gt_density(&boxes, image.height, image.width)?;
    if g.skipped > 0 {
        warn!("{} annotations fall outside image {}", g.skipped, image.id);
    }
    info!("image {}: {} boxes, mass {:.4}", image.id, boxes.len(), g.map.sum());
    write_tensor(&a.out, g.map.values())?;
    if let Some(p) = &a.heatmap {
        write_heatmap(p, g.map.values())?;
    }
    Ok(())
}

fn calibrate(a: &CalibrateArgs, seed: u64) -> Outcome {
    let d = read_density(&a.density)?;
    let params = load_or_init(a.params.as_deref(), || calibration_params(seed))?;
    let cal = calibrate_density(&d, &params)?;
    write_tensor(&a.out, cal.values())?;
    if let Some(p) = &a.heatmap {
        write_heatmap(p, cal.values())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct RegionsFile {
    height: usize,
    width: usize,
    threshold: Threshold,
    active: usize,
    /// 1-based inclusive corners.
    regions: Vec<Rect>,
}

fn regions_file(mask: &tinydense_core::BinaryMask, rects: &[Rect], threshold: Threshold) -> RegionsFile {
    RegionsFile {
        height: mask.height(),
        width: mask.width(),
        threshold,
        active: mask.count(),
        regions: rects.iter().map(Rect::one_based).collect(),
    }
}

fn select(a: &SelectRegionsArgs) -> Outcome {
    let d = read_density(&a.density)?;
    let mode = threshold(&a.threshold);
    let (mask, regions) = select_regions(&d, mode)?;
    write_tensor(&a.out_mask, mask.values())?;
    write_json_value(&a.regions, &regions_file(&mask, &regions.rects, mode))?;
    if let Some(p) = &a.heatmap {
        write_heatmap(p, mask.values())?;
    }
    Ok(())
}

fn dafm(a: &DafmArgs, seed: u64) -> Outcome {
    let x = read_tensor(&a.features)?;
    let (c, _, _) = x.chw()?;
    let d = read_density(&a.density)?;
    let mut cfg = DafmConfig::new(c, a.width.unwrap_or(c));
    cfg.max_agents = a.max_agents;
    cfg.threshold = threshold(&a.threshold);
    let params = load_or_init(a.params.as_deref(), || cfg.init_params(seed))?;
    let out = dafm_forward(&x, &d, &params, &cfg)?;
    info!(
        "dafm: {} agents, ifam {} MACs of {} total",
        out.agents.as_ref().map_or(0, |t| t.shape()[0]),
        out.ifam_macs,
        out.total_macs
    );
    write_tensor(&a.out, &out.out)?;
    if let Some(p) = &a.save_params {
        write_params(p, &params)?;
    }
    if let Some(dir) = &a.dump_dir {
        ensure_dir(dir)?;
        write_tensor(dir.join("mask.drmt"), out.mask.values())?;
        write_json_value(
            dir.join("regions.json"),
            &regions_file(&out.mask, &out.regions.rects, cfg.threshold),
        )?;
        if let Some(t) = &out.agents {
            write_tensor(dir.join("agents.drmt"), t)?;
        }
        if let Some(t) = &out.o_a {
            write_tensor(dir.join("o_a.drmt"), t)?;
        }
        write_json_value(
            dir.join("macs.json"),
            &json!({ "ifam": out.ifam_macs, "total": out.total_macs }),
        )?;
    }
    Ok(())
}

fn dffm(a: &DffmArgs, seed: u64) -> Outcome {
    let x = read_tensor(&a.features)?;
    let (c, _, _) = x.chw()?;
    let d = read_density(&a.density)?;
    let cfg = DffmConfig::new(c).with_kernels(&a.kernels);
    let params = load_or_init(a.params.as_deref(), || cfg.init_params(seed))?;
    let out = dffm_forward(&x, &d, &params, &cfg)?;
    info!("dffm: kernels {:?}, {} MACs", cfg.kernels, out.macs);
    write_tensor(&a.out, &out.out)?;
    if let Some(p) = &a.save_params {
        write_params(p, &params)?;
    }
    if let Some(dir) = &a.dump_dir {
        ensure_dir(dir)?;
        for (k, t) in &out.paths {
            write_tensor(dir.join(format!("path_k{k}.drmt")), t)?;
        }
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Outcome {
    let file = read_annotations(&a.gt)?;
    let (gts, dropped) = file.boxes()?;
    if dropped > 0 {
        warn!("{dropped} ground-truth boxes lie outside their image and were dropped");
    }
    let dets = read_detections(&a.dets)?;
    let max_dets = a
        .max_dets
        .unwrap_or(if a.dense { DENSE_MAX_DETS } else { DEFAULT_MAX_DETS });
    if max_dets == 0 {
        return Err(Failure::Usage("--max-dets must be at least 1".into()));
    }
    let report = ap_report(&dets, &gts, max_dets)?;
    let mut value = serde_json::to_value(report).map_err(|e| Failure::Core(e.into()))?;
    if let Some(t) = a.per_category {
        if !(0.0..=1.0).contains(&t) {
            return Err(Failure::Usage(format!("--per-category IoU {t} outside [0, 1]")));
        }
        let per = per_category_ap(&dets, &gts, t, max_dets)?;
        let per: serde_json::Map<String, serde_json::Value> =
            per.into_iter().map(|(c, ap)| (c.to_string(), json!(ap))).collect();
        value["per_category"] = serde_json::Value::Object(per);
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&value).map_err(|e| Failure::Core(e.into()))?
    );
    if let Some(p) = &a.csv {
        let mut s = String::from("metric,value\n");
        for (name, v) in report.metrics() {
            s.push_str(&format!("{name},{v}\n"));
        }
        s.push_str(&format!("tp,{}\nfp,{}\nfn,{}\n", report.tp, report.fp, report.fn_count));
        fs::write(p, s).map_err(|e| Failure::Core(e.into()))?;
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, seed: u64) -> Outcome {
    let module = GradModule::from_str(&a.module)?;
    if !(a.eps > 0.0 && a.eps.is_finite()) {
        return Err(Failure::Usage(format!("--eps {} must be positive", a.eps)));
    }
    let checks = run_module(module, seed, a.eps)?;
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for c in &checks {
        let r = &c.report;
        let ok = c.passed(a.tolerance);
        println!(
            "{:<28} {:>5} coords  max_rel {:.3e}  scaled {:.3e}  {}",
            c.name,
            r.coords_checked,
            r.max_rel_error,
            r.max_scaled_error,
            if ok { "ok" } else { "FAIL" }
        );
        worst = worst.max(r.max_rel_error);
        if !ok {
            failed.push(c.name.clone());
        }
    }
    println!(
        "max relative error {worst:.3e} (tolerance {:.0e}, module {module}, seed {seed})",
        a.tolerance
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Tolerance(format!(
            "gradient check above tolerance for {}",
            failed.join(", ")
        )))
    }
}

fn train(a: &TrainDemoArgs, seed: u64) -> Outcome {
    let cfg = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        seed,
        scenes: a.scenes,
        size: a.size,
        weights: LossWeights {
            reg: a.w_reg,
            cls: a.w_cls,
            dense: a.w_dense,
        },
        ..TrainConfig::default()
    };
    let (trace, params) = train_demo(&cfg)?;
    match &a.trace {
        Some(p) => {
            fs::write(p, trace.to_csv()).map_err(|e| Failure::Core(e.into()))?;
            println!(
                "l_dense {:.6e} -> {:.6e} over {} steps ({:.1}% lower)",
                trace.initial(),
                trace.last(),
                cfg.steps,
                100.0 * (1.0 - trace.last() / trace.initial())
            );
        }
        None => print!("{}", trace.to_csv()),
    }
    if let Some(p) = &a.save_params {
        write_params(p, &params)?;
    }
    Ok(())
}
