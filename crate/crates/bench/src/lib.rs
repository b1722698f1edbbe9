//! Seeded inputs shared by the benchmarks.

use tinydense_core::gradcheck::seeded;
use tinydense_core::synth::{generate_scene, perturb_detections, SceneSpec};
use tinydense_core::{BBoxAnnotation, DensityMap, Detection, Tensor};

/// Features `[c, side, side]` with entries in `[-1, 1)`.
pub fn features(c: usize, side: usize, seed: u64) -> Tensor {
    seeded(&[c, side, side], seed)
}

/// A non-negative density map of the given size.
pub fn density(side: usize, seed: u64) -> DensityMap {
    DensityMap::new(seeded(&[1, side, side], seed).map(f64::abs)).expect("non-negative by construction")
}

/// Ground truth and noisy detections for `images` synthetic scenes.
pub fn eval_corpus(images: u64, seed: u64) -> (Vec<BBoxAnnotation>, Vec<Detection>) {
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for i in 0..images {
        let spec = SceneSpec {
            image_id: i + 1,
            n_clusters: 4,
            objects_per_cluster: (20, 40),
            object_size: (3, 24),
            seed: seed + i,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec).expect("valid spec");
        dets.extend(perturb_detections(&scene.annotations, 2.0, 0.2, 0.2, seed ^ i).expect("valid noise"));
        gts.extend(scene.annotations);
    }
    (gts, dets)
}
