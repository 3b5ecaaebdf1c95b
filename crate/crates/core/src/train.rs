//! Supervised training on scenes with ground-truth depth.

use std::sync::Arc;

use log::{debug, info};
use nlmvs_tensor::{Adam, Gradients, ParameterStore, Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{sample_inverse_depth, DepthHypothesisSet, PixelWindow};
use crate::error::{MvsError, Result};
use crate::features::extract_features;
use crate::inference::{GroundTruthDepth, ModelConfig};
use crate::regularizer::{Regularizer, RegularizerState};
use crate::scene::Scene;
use crate::stream::{regularize_stream, stream_logits, unroll, unrolled_logits, CostSource, Direction, StreamOrder};
use crate::sweep::{compute_features, FeatureInput, PlaneSweep};

/// Plane order used for each training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainDirection {
    Forward,
    Backward,
    /// Forward or backward with equal probability, per sample.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Depth planes per training sample.
    pub planes: usize,
    /// Side of the random square crop; 0 trains on whole images.
    pub crop: usize,
    pub direction: TrainDirection,
    /// Blocks per backpropagation window; 0 backpropagates through the
    /// whole stream.
    pub bptt_blocks: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            planes: 32,
            crop: 32,
            direction: TrainDirection::Random,
            bptt_blocks: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.planes < 2 {
            return Err(MvsError::Config(format!("need at least 2 planes, got {}", self.planes)));
        }
        if self.crop % 4 != 0 {
            return Err(MvsError::Config(format!("crop {} must be a multiple of 4", self.crop)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(MvsError::Config(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// A reference view of a scene that has ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub scene: usize,
    pub reference: usize,
}

pub fn samples<T: Scalar>(scenes: &[Scene<T>]) -> Vec<Sample> {
    scenes
        .iter()
        .enumerate()
        .flat_map(|(s, sc)| {
            sc.gt_depths
                .iter()
                .enumerate()
                .filter(|(_, g)| g.is_some())
                .map(move |(r, _)| Sample { scene: s, reference: r })
        })
        .collect()
}

fn ground_truth<T: Scalar>(scene: &Scene<T>, reference: usize) -> Result<GroundTruthDepth> {
    scene
        .gt_depths
        .get(reference)
        .and_then(Option::as_ref)
        .map(GroundTruthDepth::from_map)
        .ok_or_else(|| MvsError::Invalid(format!("view {reference} has no ground-truth depth")))
}

/// Loss and gradients of one sample, accumulated into `store`.
/// Returns `None` when the window holds no valid ground truth.
pub fn accumulate_sample<T: Scalar>(
    store: &mut ParameterStore<T>,
    model: &ModelConfig,
    scene: &Scene<T>,
    reference: usize,
    hypotheses: &DepthHypothesisSet,
    window: PixelWindow,
    direction: Direction,
    bptt_blocks: usize,
) -> Result<Option<f64>> {
    let gt = ground_truth(scene, reference)?;
    let targets = gt.targets(hypotheses, window);
    let n = targets.iter().flatten().count();
    if n == 0 {
        return Ok(None);
    }
    let (loss, grads) = sample_gradients(store, model, scene, reference, hypotheses, window, direction, bptt_blocks, targets, n)?;
    for g in &grads {
        store.accumulate(g)?;
    }
    Ok(Some(loss))
}

#[allow(clippy::too_many_arguments)]
fn sample_gradients<T: Scalar>(
    store: &ParameterStore<T>,
    model: &ModelConfig,
    scene: &Scene<T>,
    reference: usize,
    hypotheses: &DepthHypothesisSet,
    window: PixelWindow,
    direction: Direction,
    bptt_blocks: usize,
    targets: Vec<Option<u32>>,
    n: usize,
) -> Result<(f64, Vec<Gradients<T>>)> {
    let cameras = scene.cameras();
    let mut ftape = Tape::new();
    let mut fvars = Vec::with_capacity(scene.len());
    for v in &scene.views {
        let img = ftape.constant(v.image.clone());
        fvars.push(extract_features(&mut ftape, store, &model.features, img)?);
    }
    let feats: Vec<Tensor<T>> = fvars.iter().map(|&v| ftape.value(v).clone()).collect();
    let sweep = PlaneSweep::new(store, &model.features, &cameras, &feats, reference, hypotheses)?
        .with_window(window)?
        .with_input(FeatureInput::Leaf);
    let reg = Regularizer::new(&model.regularizer, store)?;
    // Leaf gradients per view, in scene order.
    let mut feat_grads: Vec<Option<Tensor<T>>> = vec![None; scene.len()];
    let mut collect_leaves = |grads: &Gradients<T>, full: Var, sources: &[Var]| {
        let mut src = sources.iter();
        for (i, slot) in feat_grads.iter_mut().enumerate() {
            let v = if i == reference { full } else { *src.next().expect("one leaf per source") };
            if let Some(g) = grads.get(v) {
                match slot {
                    Some(acc) => acc.add_assign(g),
                    None => *slot = Some(g.clone()),
                }
            }
        }
    };
    let mut out = Vec::new();
    let scale = T::one() / T::of(n as f64);
    let loss;
    if bptt_blocks == 0 {
        let mut tape = Tape::new();
        let at = sweep.attach(&mut tape)?;
        let logits = unrolled_logits(&mut tape, &reg, &sweep, &at, direction)?;
        let ls = tape.log_softmax_depth(logits)?;
        let l = tape.pick_depth(ls, Arc::new(targets), -scale)?;
        loss = tape.value(l).item().to_f64().unwrap_or(f64::NAN);
        let grads = tape.backward(l)?;
        collect_leaves(&grads, at.reference_full, &at.sources);
        out.push(grads);
    } else {
        // Exact loss gradient at every logit from a gradient-free pass, then
        // windowed recomputation that only backpropagates within a window.
        let logits = stream_logits(&reg, &sweep, direction)?;
        let p = nlmvs_tensor::ops::softmax_depth(&logits)?;
        let (d, h, w) = (p.shape()[0], p.shape()[1], p.shape()[2]);
        let hw = h * w;
        let mut seed = Tensor::zeros(&[d, h, w]);
        let mut total = 0.0;
        for (px, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let t = t as usize;
                total -= p.data()[t * hw + px].to_f64().unwrap_or(f64::NAN).ln();
                for k in 0..d {
                    let onehot = if k == t { T::one() } else { T::zero() };
                    seed.data_mut()[k * hw + px] = (p.data()[k * hw + px] - onehot) * scale;
                }
            }
        }
        loss = total / n as f64;
        let order = StreamOrder::new(d, reg.config().block_size, direction)?;
        let span = bptt_blocks * reg.config().block_size;
        let mut state = reg.initial_state(h, w)?;
        let mut start = 0;
        while start < order.len() {
            let end = (start + span).min(order.len());
            let mut tape = Tape::new();
            let at = sweep.attach(&mut tape)?;
            let mut vars = state.attach(&mut tape);
            let mut produced = Vec::new();
            unroll(&mut tape, &reg, &sweep, &at, &order, start..end, &mut vars, &mut produced)?;
            state = RegularizerState::detach(&tape, &vars);
            let seeds = produced
                .into_iter()
                .map(|(plane, v)| {
                    let g = Tensor::new(&[1, h, w], seed.data()[plane * hw..(plane + 1) * hw].to_vec())?;
                    Ok((v, g))
                })
                .collect::<Result<Vec<_>>>()?;
            let grads = tape.backward_with(seeds)?;
            collect_leaves(&grads, at.reference_full, &at.sources);
            out.push(grads);
            start = end;
        }
    }
    let seeds: Vec<(Var, Tensor<T>)> = fvars
        .iter()
        .zip(feat_grads)
        .filter_map(|(&v, g)| g.map(|g| (v, g)))
        .collect();
    if !seeds.is_empty() {
        out.push(ftape.backward_with(seeds)?);
    }
    if !loss.is_finite() {
        return Err(MvsError::Numerical(format!("training loss became {loss}")));
    }
    Ok((loss, out))
}

/// Mean classification loss over every sample, whole images, near-to-far
/// planes, without gradients.
pub fn evaluate_loss<T: Scalar>(
    store: &ParameterStore<T>,
    model: &ModelConfig,
    scenes: &[Scene<T>],
    planes: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for (si, scene) in scenes.iter().enumerate() {
        let hyps = sample_inverse_depth(scene.d_min, scene.d_max, planes)?;
        let features = compute_features(store, &model.features, &scene.views)?;
        let cameras = scene.cameras();
        for s in samples(std::slice::from_ref(scene)) {
            let gt = ground_truth(scene, s.reference)?;
            let cam = &cameras[s.reference];
            let targets = gt.targets(&hyps, PixelWindow::full(cam.height(), cam.width()));
            if targets.iter().all(Option::is_none) {
                continue;
            }
            let sweep = PlaneSweep::new(store, &model.features, &cameras, &features, s.reference, &hyps)?;
            let reg = Regularizer::new(&model.regularizer, store)?;
            let n = targets.len();
            let mut best = vec![f64::NEG_INFINITY; n];
            let mut mass = vec![0.0; n];
            let mut picked = vec![0.0; n];
            regularize_stream(&reg, &sweep, Direction::Forward, |plane, logit| {
                for (i, &l) in logit.data().iter().enumerate() {
                    let l = l.to_f64().unwrap_or(f64::NAN);
                    if l > best[i] {
                        mass[i] = mass[i] * (best[i] - l).exp() + 1.0;
                        best[i] = l;
                    } else {
                        mass[i] += (l - best[i]).exp();
                    }
                    if targets[i] == Some(plane as u32) {
                        picked[i] = l;
                    }
                }
                Ok(())
            })?;
            let (mut sum, mut m) = (0.0, 0);
            for i in 0..n {
                if targets[i].is_some() {
                    sum += best[i] + mass[i].ln() - picked[i];
                    m += 1;
                }
            }
            debug!("scene {si} view {}: loss {:.5}", s.reference, sum / m as f64);
            total += sum / m as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(MvsError::Invalid("no samples with ground truth".into()));
    }
    let loss = total / count as f64;
    if !loss.is_finite() {
        return Err(MvsError::Numerical(format!("evaluation loss is {loss}")));
    }
    Ok(loss)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Runs `cfg.epochs` epochs numbered from `first_epoch + 1`, one Adam step
/// per sample, and reports each epoch's mean training loss to `on_epoch`.
pub fn train<T: Scalar, F>(
    store: &mut ParameterStore<T>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    scenes: &[Scene<T>],
    first_epoch: usize,
    mut on_epoch: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize, f64, &ParameterStore<T>) -> Result<()>,
{
    cfg.validate()?;
    model.check_compatible(store)?;
    let all = samples(scenes);
    if all.is_empty() {
        return Err(MvsError::Invalid("no training samples with ground truth".into()));
    }
    let hyps: Vec<DepthHypothesisSet> = scenes
        .iter()
        .map(|s| sample_inverse_depth(s.d_min, s.d_max, cfg.planes))
        .collect::<Result<_>>()?;
    let adam = Adam::with_lr(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in first_epoch + 1..=first_epoch + cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order = all.clone();
        order.shuffle(&mut rng);
        let (mut sum, mut steps) = (0.0, 0);
        for s in order {
            let scene = &scenes[s.scene];
            let cam = &scene.views[s.reference].camera;
            let (h, w) = (cam.height(), cam.width());
            let window = if cfg.crop == 0 {
                PixelWindow::full(h, w)
            } else {
                if cfg.crop > h || cfg.crop > w {
                    return Err(MvsError::Config(format!("crop {} exceeds image {h}x{w}", cfg.crop)));
                }
                PixelWindow {
                    y0: rng.gen_range(0..=h - cfg.crop),
                    x0: rng.gen_range(0..=w - cfg.crop),
                    height: cfg.crop,
                    width: cfg.crop,
                }
            };
            let direction = match cfg.direction {
                TrainDirection::Forward => Direction::Forward,
                TrainDirection::Backward => Direction::Backward,
                TrainDirection::Random if rng.gen_bool(0.5) => Direction::Forward,
                TrainDirection::Random => Direction::Backward,
            };
            let loss = accumulate_sample(
                store,
                model,
                scene,
                s.reference,
                &hyps[s.scene],
                window,
                direction,
                cfg.bptt_blocks,
            )?;
            if let Some(loss) = loss {
                adam.step(store);
                sum += loss;
                steps += 1;
                debug!("epoch {epoch} step {steps}: loss {loss:.5} ({direction:?})");
            }
        }
        if steps == 0 {
            return Err(MvsError::Invalid(format!("epoch {epoch} had no usable samples")));
        }
        let mean = sum / steps as f64;
        info!("epoch {epoch}: mean loss {mean:.5} over {steps} steps");
        losses.push(mean);
        on_epoch(epoch, mean, store)?;
    }
    Ok(losses)
}
