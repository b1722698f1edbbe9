//! Randomized invariants.

mod support;

use proptest::prelude::*;
use tinydense_core::density::{calibrate_density, calibration_params, density_loss, gt_density};
use tinydense_core::dffm::{frequency_masks, frequency_split, DffmConfig};
use tinydense_core::eval::{ap_report, AreaBucket, DEFAULT_MAX_DETS};
use tinydense_core::io::{decode_tensor, encode_tensor};
use tinydense_core::ops::{dct2, idct2, softmax};
use tinydense_core::region::{refine_mask, threshold_mask, BinaryMask, Threshold};
use tinydense_core::synth::{generate_scene, perturb_detections, SceneSpec};
use tinydense_core::{BBoxAnnotation, DensityMap, Detection, Tensor};

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn feature_map(max_c: usize, max_hw: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_c, 1..=max_hw, 1..=max_hw).prop_flat_map(|(c, h, w)| tensor(vec![c, h, w], -10.0, 10.0))
}

fn mask(max_hw: usize) -> impl Strategy<Value = BinaryMask> {
    (1..=max_hw, 1..=max_hw).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<bool>(), h * w)
            .prop_map(move |bits| BinaryMask::from_fn(h, w, |r, c| bits[r * w + c]).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dct_round_trip(x in feature_map(3, 16)) {
        prop_assert!(idct2(&dct2(&x).unwrap()).unwrap().max_abs_diff(&x) < 1e-9);
        prop_assert!(dct2(&idct2(&x).unwrap()).unwrap().max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn dct_preserves_energy(x in feature_map(3, 16)) {
        let e = x.sq_norm();
        prop_assume!(e > 0.0);
        prop_assert!((dct2(&x).unwrap().sq_norm() - e).abs() / e < 1e-12);
    }

    #[test]
    fn dct_is_linear(x in tensor(vec![2, 5, 7], -5.0, 5.0), y in tensor(vec![2, 5, 7], -5.0, 5.0),
                     a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let want = dct2(&x).unwrap().zip_map(&dct2(&y).unwrap(), |p, q| a * p + b * q).unwrap();
        prop_assert!(dct2(&mix).unwrap().max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn softmax_slices_sum_to_one(x in (1usize..6, 1usize..6).prop_flat_map(|(m, n)| tensor(vec![m, n], -1e6, 1e6)),
                                 axis in 0usize..2) {
        let s = softmax(&x, axis).unwrap();
        prop_assert!(s.all_finite());
        let (m, n) = x.matrix_dims().unwrap();
        let (outer, inner) = if axis == 0 { (n, m) } else { (m, n) };
        for o in 0..outer {
            let total: f64 = (0..inner)
                .map(|i| if axis == 0 { s.data()[i * n + o] } else { s.data()[o * n + i] })
                .sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn refined_mask_covers_and_is_rectangle_union(m in mask(12)) {
        let (refined, regions) = refine_mask(&m).unwrap();
        prop_assert!(regions.rects.len() <= 2);
        prop_assert!(refined.count() >= m.count());
        for r in 0..m.height() {
            for c in 0..m.width() {
                if m.get(r, c) {
                    prop_assert!(refined.get(r, c));
                }
                prop_assert_eq!(refined.get(r, c), regions.contains(r, c));
            }
        }
        prop_assert_eq!(refine_mask(&m).unwrap(), (refined, regions));
    }

    #[test]
    fn refinement_matches_rational_reference(m in mask(7)) {
        let bits: Vec<bool> = m.values().data().iter().map(|&v| v == 1.0).collect();
        let (want, rects) = support::region_reference(&bits, m.height(), m.width());
        let (got, regions) = refine_mask(&m).unwrap();
        let got_bits: Vec<bool> = got.values().data().iter().map(|&v| v == 1.0).collect();
        prop_assert_eq!(got_bits, want);
        let got_rects: Vec<_> = regions.rects.iter().map(|r| {
            let o = r.one_based();
            (o.r_min, o.r_max, o.c_min, o.c_max)
        }).collect();
        prop_assert_eq!(got_rects, rects);
    }

    /// Two full rectangles hugging opposite corners are each nearer their
    /// own initial centroid, so refinement returns them unchanged.
    #[test]
    fn separated_corner_rectangles_are_fixed_points(h in 8usize..24, w in 8usize..24,
                                                    a in (1usize..4, 1usize..4), b in (1usize..4, 1usize..4)) {
        let m = BinaryMask::from_fn(h, w, |r, c| (r < a.0 && c < a.1) || (r >= h - b.0 && c >= w - b.1)).unwrap();
        let (refined, regions) = refine_mask(&m).unwrap();
        prop_assert_eq!(regions.rects.len(), 2);
        prop_assert_eq!(refined, m);
    }

    #[test]
    fn quantile_keeps_at_least_the_requested_share(d in tensor(vec![1, 6, 5], 0.0, 3.0), p in 0.01f64..=1.0) {
        prop_assume!(d.max() > 0.0);
        let m = threshold_mask(&DensityMap::new(d).unwrap(), Threshold::Quantile(p)).unwrap();
        prop_assert!(m.count() >= (p * 30.0 - 1e-9).ceil() as usize);
    }

    #[test]
    fn masks_are_complementary(x in tensor(vec![3, 5, 6], -4.0, 4.0), d in tensor(vec![1, 5, 6], 0.0, 5.0), seed in 0u64..1000) {
        let params = DffmConfig::new(3).init_params(seed).unwrap();
        let (lo, hi) = frequency_masks(&x, &DensityMap::new(d).unwrap(), &params, "dffm.p0").unwrap();
        prop_assert!(lo.data().iter().zip(hi.data()).all(|(a, b)| a + b == 1.0));
        let pair = frequency_split(&x, &lo, &hi).unwrap();
        let spec = dct2(&x).unwrap();
        prop_assert!(pair.f_low.zip_map(&pair.f_high, |a, b| a + b).unwrap().max_abs_diff(&spec) < 1e-9);
    }

    #[test]
    fn calibration_stays_inside_unit_interval(d in tensor(vec![1, 4, 4], 0.0, 1e6), seed in 0u64..1000) {
        let out = calibrate_density(&DensityMap::new(d).unwrap(), &calibration_params(seed).unwrap()).unwrap();
        prop_assert!(out.values().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn density_loss_is_symmetric(a in tensor(vec![1, 3, 4], 0.0, 2.0), b in tensor(vec![1, 3, 4], 0.0, 2.0)) {
        let (a, b) = (DensityMap::new(a).unwrap(), DensityMap::new(b).unwrap());
        prop_assert_eq!(density_loss(&a, &b).unwrap(), density_loss(&b, &a).unwrap());
        prop_assert_eq!(density_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn tensor_file_round_trip(x in feature_map(4, 9)) {
        let bytes = encode_tensor(&x).unwrap();
        let back = decode_tensor(&bytes).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        prop_assert!(back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(encode_tensor(&back).unwrap(), bytes);
    }

    #[test]
    fn single_interior_object_has_unit_mass(w in 1.0f64..16.0, h in 1.0f64..16.0, fx in 0.0f64..1.0, fy in 0.0f64..1.0) {
        let gamma = 0.5 * (w * w + h * h).sqrt();
        prop_assume!((2.0..=8.0).contains(&gamma));
        let r = (3.0 * gamma).ceil() + 1.0;
        let cx = r + fx * (64.0 - 2.0 * r);
        let cy = r + fy * (64.0 - 2.0 * r);
        let g = BBoxAnnotation::from_xywh(1, 1, [cx - w / 2.0, cy - h / 2.0, w, h]);
        let sum = gt_density(&[g], 64, 64).unwrap().map.sum();
        prop_assert!((0.985..=1.001).contains(&sum), "sum {}", sum);
    }

    /// Coordinates on a 1/16 pixel grid, so integer shifts are exact in f64.
    #[test]
    fn density_translates_exactly(boxes in prop::collection::vec((64u32..320, 64u32..320, 16u32..96, 16u32..96), 1..6),
                                  dx in 0i32..12, dy in 0i32..12) {
        let shift = |sx: f64, sy: f64| -> Vec<BBoxAnnotation> {
            boxes
                .iter()
                .map(|&(x, y, w, h)| {
                    let q = |v: u32| v as f64 / 16.0;
                    BBoxAnnotation::from_xywh(1, 1, [q(x) + sx, q(y) + sy, q(w), q(h)])
                })
                .collect()
        };
        let base = gt_density(&shift(0.0, 0.0), 64, 64).unwrap().map.into_tensor();
        let moved = gt_density(&shift(dx as f64, dy as f64), 64, 64).unwrap().map.into_tensor();
        // compare inside the window where neither map is cut by the border
        for y in 0..40 {
            for x in 0..40 {
                prop_assert_eq!(moved.at3(0, y + dy as usize, x + dx as usize), base.at3(0, y, x));
            }
        }
    }

    #[test]
    fn bucket_partition(area in prop_oneof![0.001f64..5000.0, Just(64.0), Just(256.0), Just(1024.0)]) {
        let holding: Vec<_> = AreaBucket::SIZED.into_iter().filter(|b| b.contains(area)).collect();
        prop_assert_eq!(holding.len(), 1);
        prop_assert_eq!(holding[0], AreaBucket::of(area));
    }
}

fn scene_case() -> impl Strategy<Value = (Vec<BBoxAnnotation>, Vec<Detection>)> {
    (0u64..1_000_000, 0.0f64..3.0, 0.0f64..0.5, 0.0f64..0.3).prop_map(|(seed, jitter, drop, noise)| {
        let spec = SceneSpec {
            width: 96,
            height: 96,
            objects_per_cluster: (2, 5),
            object_size: (3, 40),
            cluster_spread: 12.0,
            seed,
            ..SceneSpec::default()
        };
        let gts = generate_scene(&spec).unwrap().annotations;
        let dets = perturb_detections(&gts, jitter, drop, noise, seed ^ 0xabc).unwrap();
        (gts, dets)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn report_matches_staircase_reference((gts, dets) in scene_case()) {
        prop_assume!(dets.len() <= 12);
        let got = ap_report(&dets, &gts, DEFAULT_MAX_DETS).unwrap();
        let (metrics, (tp, fp, fn_count)) = support::report_reference(&dets, &gts, DEFAULT_MAX_DETS);
        for ((name, g), w) in got.metrics().into_iter().zip(metrics) {
            prop_assert!((g - w).abs() <= 1e-12, "{}: {} vs {}", name, g, w);
        }
        prop_assert_eq!((got.tp, got.fp, got.fn_count), (tp, fp, fn_count));
    }

    #[test]
    fn scores_only_matter_through_ranks((gts, dets) in scene_case(), k in 0.01f64..1.0) {
        let scaled: Vec<Detection> = dets.iter().map(|d| Detection { score: d.score * k, ..*d }).collect();
        prop_assert_eq!(ap_report(&dets, &gts, DEFAULT_MAX_DETS).unwrap(), ap_report(&scaled, &gts, DEFAULT_MAX_DETS).unwrap());
    }

    #[test]
    fn trailing_false_positives_change_nothing((gts, dets) in scene_case(), extra in 1usize..5) {
        let floor = dets.iter().map(|d| d.score).fold(1.0, f64::min);
        prop_assume!(floor > 0.0);
        let mut more = dets.clone();
        for i in 0..extra {
            // far outside the image, so they can never match
            more.push(Detection { image_id: 1, category_id: 1, bbox: [1e4 + 50.0 * i as f64, 1e4, 5.0, 5.0], score: floor / 2.0 });
        }
        let a = ap_report(&dets, &gts, DEFAULT_MAX_DETS).unwrap();
        let b = ap_report(&more, &gts, DEFAULT_MAX_DETS).unwrap();
        prop_assert_eq!(a.metrics(), b.metrics());
    }

    #[test]
    fn a_new_true_positive_never_hurts((gts, dets) in scene_case()) {
        // a ground truth no detection touches stays unmatched at every threshold
        let lonely = gts.iter().find(|g| dets.iter().all(|d| {
            let b = g.to_xywh();
            d.bbox[0] >= b[0] + b[2] || b[0] >= d.bbox[0] + d.bbox[2] || d.bbox[1] >= b[1] + b[3] || b[1] >= d.bbox[1] + d.bbox[3]
        }));
        prop_assume!(lonely.is_some());
        let g = lonely.unwrap();
        let mut more = dets.clone();
        more.push(Detection { image_id: g.image_id, category_id: g.category_id, bbox: g.to_xywh(), score: 1.0 });
        let a = ap_report(&dets, &gts, DEFAULT_MAX_DETS).unwrap();
        let b = ap_report(&more, &gts, DEFAULT_MAX_DETS).unwrap();
        for ((name, x), (_, y)) in a.metrics().into_iter().zip(b.metrics()) {
            prop_assert!(y >= x - 1e-15, "{} fell from {} to {}", name, x, y);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scenes_are_clustered(seed in 0u64..1_000_000, clusters in 1usize..4) {
        let spec = SceneSpec { n_clusters: clusters, seed, ..SceneSpec::default() };
        let scene = generate_scene(&spec).unwrap();
        prop_assert_eq!(scene.annotations.len(), 10 * clusters);
        let map = gt_density(&scene.annotations, 256, 256).unwrap().map.into_tensor();
        let radius = 3.0 * spec.cluster_spread;
        let mut inside = 0.0;
        for y in 0..256 {
            for x in 0..256 {
                if scene.centers.iter().any(|&(cx, cy)| (x as f64 - cx).hypot(y as f64 - cy) <= radius) {
                    inside += map.at3(0, y, x);
                }
            }
        }
        prop_assert!(inside >= 0.9 * map.sum(), "{} of {}", inside, map.sum());
    }

    #[test]
    fn scenes_are_reproducible(seed in any::<u64>()) {
        let spec = SceneSpec { seed, ..SceneSpec::default() };
        let a = generate_scene(&spec).unwrap();
        prop_assert_eq!(a.annotations.len(), 20);
        prop_assert_eq!(a, generate_scene(&spec).unwrap());
    }
}
