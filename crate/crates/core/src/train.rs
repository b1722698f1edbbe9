//! Full-batch gradient descent of the density branch on synthetic scenes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::density::{dgb_forward_on, gt_density, DgbConfig, LossWeights};
use crate::error::{invalid, Error, Result};
use crate::params::ParamBundle;
use crate::rng::SplitMix64;
use crate::synth::{generate_scene, SceneSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub scenes: usize,
    pub size: usize,
    pub dgb: DgbConfig,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.05,
            seed: 7,
            scenes: 8,
            size: 64,
            dgb: DgbConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

/// The micro corpus: `(image, target density)` pairs.
pub fn training_corpus(cfg: &TrainConfig) -> Result<Vec<(Tensor, Tensor)>> {
    let mut seeds = SplitMix64::new(cfg.seed);
    (0..cfg.scenes)
        .map(|i| {
            let spec = SceneSpec {
                width: cfg.size,
                height: cfg.size,
                n_clusters: 2,
                objects_per_cluster: (3, 6),
                object_size: (3, 8),
                cluster_spread: cfg.size as f64 / 10.0,
                image_id: i as u64 + 1,
                seed: seeds.next_u64(),
                ..SceneSpec::default()
            };
            let scene = generate_scene(&spec)?;
            let target = gt_density(&scene.annotations, cfg.size, cfg.size)?.map.into_tensor();
            Ok((scene.image, target))
        })
        .collect()
}

/// Mean density loss over the corpus and its gradient per parameter.
fn loss_and_grad(
    params: &ParamBundle,
    corpus: &[(Tensor, Tensor)],
    dgb: &DgbConfig,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut total = 0.0;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let n = corpus.len() as f64;
    for (image, target) in corpus {
        let mut tape = Tape::new();
        let p = tape.bind(params, true);
        let x = tape.constant(image.clone());
        let y = tape.constant(target.clone());
        let pred = dgb_forward_on(&mut tape, x, &p, dgb)?;
        let loss = tape.mse(pred, y)?;
        total += tape.value(loss).data()[0] / n;
        let g = tape.grad(loss)?;
        for (name, v) in p.iter() {
            let gv = g.get_or_zeros(v, tape.value(v));
            match grads.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(gv.data()) {
                        *a += b / n;
                    }
                }
                None => {
                    grads.insert(name.to_string(), gv.map(|b| b / n));
                }
            }
        }
    }
    Ok((total, grads))
}

/// Density loss before each step and after the last, `steps + 1` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,l_dense\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l:e}\n"));
        }
        s
    }

    pub fn initial(&self) -> f64 {
        self.losses[0]
    }

    pub fn last(&self) -> f64 {
        *self.losses.last().expect("trace is never empty")
    }
}

pub fn train_demo(cfg: &TrainConfig) -> Result<(TrainTrace, ParamBundle)> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(invalid(format!("learning rate {} must be finite and >= 0", cfg.lr)));
    }
    if cfg.scenes == 0 {
        return Err(invalid("the corpus needs at least one scene"));
    }
    // the regression and classification terms are not modelled here, so only
    // the density weight scales the update
    let scale = cfg.weights.combine(0.0, 0.0, 1.0)?;
    let corpus = training_corpus(cfg)?;
    let mut params = cfg.dgb.init_params(cfg.seed)?;
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let (loss, grads) = loss_and_grad(&params, &corpus, &cfg.dgb)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("density loss is {loss} at step {step}")));
        }
        losses.push(loss);
        if step == cfg.steps {
            break;
        }
        for (name, t) in params.iter_mut() {
            let g = &grads[name];
            for (w, d) in t.data_mut().iter_mut().zip(g.data()) {
                *w -= cfg.lr * scale * d;
            }
        }
    }
    Ok((TrainTrace { losses }, params))
}
