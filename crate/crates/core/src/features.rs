//! Image features, per-view matching weights and per-plane matching costs.

use nlmvs_tensor::{Conv2dOpts, ParameterStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MvsError, Result};

pub const FEATURE_CHANNELS: usize = 32;

const KERNEL: usize = 3;
const VIEW_WEIGHT_HIDDEN: usize = 8;

/// `(in, out, dilation)` of the stacked feature convolutions.
pub const FEATURE_LAYERS: [(usize, usize, usize); 7] = [
    (3, 16, 1),
    (16, 16, 1),
    (16, 32, 2),
    (32, 32, 4),
    (32, 32, 2),
    (32, 32, 1),
    (32, 32, 1),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Group normalization between feature layers. Normalization statistics
    /// span the whole map, so disabling it makes every output depend only on
    /// its receptive field.
    pub normalize: bool,
    pub groups: usize,
    /// 1 (broadcast over feature channels) or [`FEATURE_CHANNELS`].
    pub view_weight_channels: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            normalize: true,
            groups: 4,
            view_weight_channels: 1,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.view_weight_channels != 1 && self.view_weight_channels != FEATURE_CHANNELS {
            return Err(MvsError::Config(format!(
                "view_weight_channels must be 1 or {FEATURE_CHANNELS}, got {}",
                self.view_weight_channels
            )));
        }
        if self.normalize {
            if self.groups == 0 {
                return Err(MvsError::Config("groups must be positive".into()));
            }
            for &(_, cout, _) in &FEATURE_LAYERS[..FEATURE_LAYERS.len() - 1] {
                if cout % self.groups != 0 {
                    return Err(MvsError::Config(format!("{cout} channels not divisible by {} groups", self.groups)));
                }
            }
            if VIEW_WEIGHT_HIDDEN % self.groups != 0 {
                return Err(MvsError::Config(format!(
                    "{VIEW_WEIGHT_HIDDEN} channels not divisible by {} groups",
                    self.groups
                )));
            }
        }
        Ok(())
    }
}

/// Pixels on each side that can influence one feature output.
pub fn receptive_radius() -> usize {
    FEATURE_LAYERS.iter().map(|&(_, _, d)| d * (KERNEL / 2)).sum()
}

pub fn init_feature_params<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParameterStore<T>,
    cfg: &FeatureConfig,
    rng: &mut R,
) -> Result<()> {
    for (i, &(cin, cout, _)) in FEATURE_LAYERS.iter().enumerate() {
        store.insert_conv(&format!("feat.conv{i}"), cout, cin, KERNEL, true, rng)?;
        if cfg.normalize && i + 1 < FEATURE_LAYERS.len() {
            store.insert_group_norm(&format!("feat.gn{i}"), cout)?;
        }
    }
    store.insert_conv("vw.conv", VIEW_WEIGHT_HIDDEN, FEATURE_CHANNELS, KERNEL, true, rng)?;
    if cfg.normalize {
        store.insert_group_norm("vw.gn", VIEW_WEIGHT_HIDDEN)?;
    }
    store.insert_conv("vw.res.conv1", VIEW_WEIGHT_HIDDEN, VIEW_WEIGHT_HIDDEN, KERNEL, true, rng)?;
    store.insert_conv("vw.res.conv2", VIEW_WEIGHT_HIDDEN, VIEW_WEIGHT_HIDDEN, KERNEL, true, rng)?;
    store.insert_conv("vw.out", cfg.view_weight_channels, VIEW_WEIGHT_HIDDEN, KERNEL, true, rng)?;
    Ok(())
}

pub(crate) fn conv<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    name: &str,
    x: Var,
    opts: Conv2dOpts,
) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.weight"))?;
    let b = if store.contains(&format!("{name}.bias")) {
        Some(tape.param(store, &format!("{name}.bias"))?)
    } else {
        None
    };
    Ok(tape.conv2d(x, w, b, opts)?)
}

pub(crate) fn conv3<T: Scalar>(tape: &mut Tape<T>, store: &ParameterStore<T>, name: &str, x: Var) -> Result<Var> {
    conv(tape, store, name, x, Conv2dOpts::same(KERNEL, 1))
}

fn norm_relu<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    cfg: &FeatureConfig,
    name: &str,
    x: Var,
) -> Result<Var> {
    let x = if cfg.normalize {
        let g = tape.param(store, &format!("{name}.gamma"))?;
        let b = tape.param(store, &format!("{name}.beta"))?;
        tape.group_norm(x, cfg.groups, g, b)?
    } else {
        x
    };
    Ok(tape.relu(x)?)
}

/// `[3,H,W]` image to `[32,H,W]` features at full resolution.
pub fn extract_features<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    cfg: &FeatureConfig,
    image: Var,
) -> Result<Var> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 3 || shape[0] != 3 || shape[1] < 16 || shape[2] < 16 {
        return Err(MvsError::Invalid(format!(
            "feature extraction needs a [3,H,W] image with H,W >= 16, got {shape:?}"
        )));
    }
    let mut x = image;
    for (i, &(_, _, dil)) in FEATURE_LAYERS.iter().enumerate() {
        x = conv(tape, store, &format!("feat.conv{i}"), x, Conv2dOpts::same(KERNEL, dil))?;
        if i + 1 < FEATURE_LAYERS.len() {
            x = norm_relu(tape, store, cfg, &format!("feat.gn{i}"), x)?;
        }
    }
    Ok(x)
}

/// Per-pixel weight in (0, 1) from a warped-minus-reference feature difference.
pub fn view_weight<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    cfg: &FeatureConfig,
    diff: Var,
) -> Result<Var> {
    let x = conv3(tape, store, "vw.conv", diff)?;
    let x = norm_relu(tape, store, cfg, "vw.gn", x)?;
    let r = conv3(tape, store, "vw.res.conv1", x)?;
    let r = tape.relu(r)?;
    let r = conv3(tape, store, "vw.res.conv2", r)?;
    let x = tape.add(x, r)?;
    let x = tape.relu(x)?;
    let x = conv3(tape, store, "vw.out", x)?;
    Ok(tape.sigmoid(x)?)
}

/// Matching cost of one depth plane.
#[derive(Debug, Clone)]
pub struct CostMap<T> {
    /// `[32,H,W]`, non-negative.
    pub cost: Var,
    /// `[1,H,W]`: 1 where at least one source view was inside its image.
    pub mask: Tensor<T>,
}

/// `C = sum_i (1 + w_i) (F_i - F_0)^2 / n`, where view `i` only contributes at
/// pixels inside its image and `n` counts those views per pixel. Pixels seen
/// by no source view get zero cost and a zero mask.
pub fn cost_map<T: Scalar>(
    tape: &mut Tape<T>,
    reference: Var,
    warped: &[Var],
    weights: &[Var],
    masks: &[Tensor<T>],
) -> Result<CostMap<T>> {
    if warped.is_empty() {
        return Err(MvsError::Invalid("cost map needs at least one source view".into()));
    }
    if weights.len() != warped.len() || masks.len() != warped.len() {
        return Err(MvsError::Invalid(format!(
            "{} warped maps, {} weights, {} masks",
            warped.len(),
            weights.len(),
            masks.len()
        )));
    }
    let shape = tape.shape(reference).to_vec();
    if shape.len() != 3 {
        return Err(MvsError::Invalid(format!("reference features must be [C,H,W], got {shape:?}")));
    }
    let hw = shape[1] * shape[2];
    let mut count = vec![0usize; hw];
    let mut acc: Option<Var> = None;
    for ((&f, &w), m) in warped.iter().zip(weights).zip(masks) {
        if m.shape() != [1, shape[1], shape[2]] {
            return Err(MvsError::Invalid(format!("mask shape {:?} for features {shape:?}", m.shape())));
        }
        for (c, &v) in count.iter_mut().zip(m.data()) {
            if v > T::zero() {
                *c += 1;
            }
        }
        let diff = tape.sub(f, reference)?;
        let sq = tape.square(diff)?;
        let scale = tape.add_scalar(w, T::one())?;
        let weighted = if tape.shape(scale)[0] == 1 {
            tape.mul_channels(sq, scale)?
        } else {
            tape.mul(sq, scale)?
        };
        let mv = tape.constant(m.clone());
        let term = tape.mul_channels(weighted, mv)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    let inv = Tensor::new(
        &[1, shape[1], shape[2]],
        count
            .iter()
            .map(|&c| if c == 0 { T::zero() } else { T::one() / T::of(c as f64) })
            .collect(),
    )?;
    let mask = Tensor::new(
        &[1, shape[1], shape[2]],
        count.iter().map(|&c| if c == 0 { T::zero() } else { T::one() }).collect(),
    )?;
    let inv = tape.constant(inv);
    let cost = tape.mul_channels(acc.expect("at least one view"), inv)?;
    Ok(CostMap { cost, mask })
}
