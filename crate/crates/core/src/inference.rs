//! Probability volumes, winner-take-all depth, the classification loss and
//! end-to-end depth inference.

use std::sync::Arc;

use nlmvs_tensor::{ParameterStore, Scalar, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{sample_inverse_depth, DepthHypothesisSet, PixelWindow};
use crate::depth::DepthMap;
use crate::error::{MvsError, Result};
use crate::features::{init_feature_params, FeatureConfig};
use crate::regularizer::{init_regularizer_params, Regularizer, RegularizerConfig};
use crate::scene::Scene;
use crate::stream::{regularize_stream, Direction};
use crate::sweep::{compute_features, PlaneSweep};

/// Architecture of the whole network.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub features: FeatureConfig,
    pub regularizer: RegularizerConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.regularizer.validate()
    }

    /// Freshly initialised parameters.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParameterStore<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        init_feature_params(&mut store, &self.features, &mut rng)?;
        init_regularizer_params(&mut store, &self.regularizer, &mut rng)?;
        Ok(store)
    }

    /// Fails unless `store` holds exactly the parameters this architecture
    /// uses, with matching shapes.
    pub fn check_compatible<T: Scalar>(&self, store: &ParameterStore<T>) -> Result<()> {
        let template = self.init_params::<T>(0)?;
        for (name, t) in template.iter() {
            match store.value(name) {
                None => return Err(MvsError::Config(format!("checkpoint lacks parameter {name}"))),
                Some(v) if v.shape() != t.shape() => {
                    return Err(MvsError::Config(format!(
                        "parameter {name} has shape {:?}, architecture expects {:?}",
                        v.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = store.names().find(|n| !template.contains(n)) {
            return Err(MvsError::Config(format!("checkpoint has unexpected parameter {extra}")));
        }
        Ok(())
    }
}

/// Per-pixel distribution over depth planes.
#[derive(Debug, Clone)]
pub struct ProbabilityVolume<T> {
    /// `[D, H, W]`.
    pub p: Tensor<T>,
    pub hypotheses: DepthHypothesisSet,
}

pub fn probability_volume<T: Scalar>(logits: &Tensor<T>, hypotheses: &DepthHypothesisSet) -> Result<ProbabilityVolume<T>> {
    if logits.rank() != 3 || logits.shape()[0] != hypotheses.len() {
        return Err(MvsError::Invalid(format!(
            "logits {:?} for {} depth planes",
            logits.shape(),
            hypotheses.len()
        )));
    }
    Ok(ProbabilityVolume {
        p: nlmvs_tensor::ops::softmax_depth(logits)?,
        hypotheses: hypotheses.clone(),
    })
}

/// Winner-take-all depth with its probability and plane index.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthEstimate {
    pub map: DepthMap,
    pub plane: Vec<u32>,
}

/// Arg-max plane per pixel; ties go to the smaller plane index.
pub fn wta_depth<T: Scalar>(volume: &ProbabilityVolume<T>) -> Result<DepthEstimate> {
    let p = &volume.p;
    let (d, h, w) = (p.shape()[0], p.shape()[1], p.shape()[2]);
    let hw = h * w;
    let mut plane = vec![0u32; hw];
    let mut prob = vec![0.0; hw];
    for px in 0..hw {
        let mut best = (0usize, p.data()[px]);
        for k in 1..d {
            let v = p.data()[k * hw + px];
            if v > best.1 {
                best = (k, v);
            }
        }
        plane[px] = best.0 as u32;
        prob[px] = best.1.to_f64().unwrap_or(f64::NAN);
    }
    let depth = plane.iter().map(|&k| volume.hypotheses.values()[k as usize]).collect();
    Ok(DepthEstimate {
        map: DepthMap::new(h, w, depth, prob)?,
        plane,
    })
}

/// Streaming winner-take-all: keeps a running maximum and log-sum-exp per
/// pixel, so the logit volume never has to exist in memory.
#[derive(Debug, Clone)]
pub struct OnlineWta {
    height: usize,
    width: usize,
    best: Vec<f64>,
    arg: Vec<u32>,
    /// `sum exp(logit - best)`.
    mass: Vec<f64>,
    seen: usize,
}

impl OnlineWta {
    pub fn new(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            best: vec![f64::NEG_INFINITY; n],
            arg: vec![0; n],
            mass: vec![0.0; n],
            seen: 0,
        }
    }

    pub fn push<T: Scalar>(&mut self, plane: usize, logit: &Tensor<T>) -> Result<()> {
        if logit.len() != self.best.len() {
            return Err(MvsError::Invalid(format!(
                "logit map {:?} for a {}x{} estimate",
                logit.shape(),
                self.height,
                self.width
            )));
        }
        for (i, &l) in logit.data().iter().enumerate() {
            let l = l.to_f64().unwrap_or(f64::NAN);
            let b = self.best[i];
            if l > b {
                self.mass[i] = self.mass[i] * (b - l).exp() + 1.0;
                self.best[i] = l;
                self.arg[i] = plane as u32;
            } else {
                self.mass[i] += (l - b).exp();
                if l == b && (plane as u32) < self.arg[i] {
                    self.arg[i] = plane as u32;
                }
            }
        }
        self.seen += 1;
        Ok(())
    }

    pub fn finish(self, hypotheses: &DepthHypothesisSet) -> Result<DepthEstimate> {
        if self.seen != hypotheses.len() {
            return Err(MvsError::Invalid(format!(
                "received {} of {} planes",
                self.seen,
                hypotheses.len()
            )));
        }
        let depth = self.arg.iter().map(|&k| hypotheses.values()[k as usize]).collect();
        let prob = self.mass.iter().map(|m| 1.0 / m).collect();
        Ok(DepthEstimate {
            map: DepthMap::new(self.height, self.width, depth, prob)?,
            plane: self.arg,
        })
    }
}

/// Ground-truth depth with its validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthDepth {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl GroundTruthDepth {
    pub fn from_map(map: &DepthMap) -> Self {
        Self {
            height: map.height,
            width: map.width,
            depth: map.depth.clone(),
            valid: map
                .prob
                .iter()
                .zip(&map.depth)
                .map(|(&p, &d)| p > 0.5 && d > 0.0 && d.is_finite())
                .collect(),
        }
    }

    /// Target plane (nearest in inverse depth) for each pixel of `window`
    /// whose depth is valid and inside the hypothesis range.
    pub fn targets(&self, hypotheses: &DepthHypothesisSet, window: PixelWindow) -> Vec<Option<u32>> {
        let mut out = Vec::with_capacity(window.height * window.width);
        for y in window.y0..window.y0 + window.height {
            for x in window.x0..window.x0 + window.width {
                let i = y * self.width + x;
                let d = self.depth[i];
                let inside = d >= hypotheses.d_min() && d <= hypotheses.d_max();
                out.push((self.valid[i] && inside).then(|| hypotheses.nearest_index(d) as u32));
            }
        }
        out
    }
}

/// `-mean_{p in targets} ln P(target(p), p)`.
pub fn cross_entropy_loss<T: Scalar>(p: &Tensor<T>, targets: &[Option<u32>]) -> Result<f64> {
    let n = targets.iter().flatten().count();
    if n == 0 {
        return Err(MvsError::Invalid("no valid ground-truth pixels".into()));
    }
    let mut tape = Tape::no_grad();
    let v = tape.constant(p.clone());
    let l = tape.neg_log_pick(v, Arc::new(targets.to_vec()), T::one() / T::of(n as f64))?;
    Ok(tape.value(l).item().to_f64().unwrap_or(f64::NAN))
}

/// Streams the cost volume of `scene.views[ref_index]` over `planes`
/// inverse-depth hypotheses through the regularizer, near to far, and keeps
/// the winner-take-all depth.
pub fn infer_depth<T: Scalar>(
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    scene: &Scene<T>,
    ref_index: usize,
    planes: usize,
) -> Result<DepthEstimate> {
    let hypotheses = sample_inverse_depth(scene.d_min, scene.d_max, planes)?;
    let features = compute_features(store, &cfg.features, &scene.views)?;
    infer_with_features(store, cfg, scene, &features, ref_index, &hypotheses)
}

/// [`infer_depth`] with precomputed per-view features.
pub fn infer_with_features<T: Scalar>(
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    scene: &Scene<T>,
    features: &[Tensor<T>],
    ref_index: usize,
    hypotheses: &DepthHypothesisSet,
) -> Result<DepthEstimate> {
    let cameras = scene.cameras();
    let sweep = PlaneSweep::new(store, &cfg.features, &cameras, features, ref_index, hypotheses)?;
    let reg = Regularizer::new(&cfg.regularizer, store)?;
    let cam = &cameras[ref_index];
    let mut wta = OnlineWta::new(cam.height(), cam.width());
    regularize_stream(&reg, &sweep, Direction::Forward, |plane, logit| wta.push(plane, logit))?;
    wta.finish(hypotheses)
}
