//! Depth-map fusion with consistency thresholds that scale with the number
//! of agreeing views.
//!
//! A reference pixel with depth `d` is checked against every other view: it
//! is unprojected, projected into the source, the source depth at the
//! nearest pixel is unprojected again and projected back. The pixel distance
//! of the round trip is the reprojection error `psi`, the relative change of
//! depth is `phi`. For a required view count `mu` the pixel is consistent
//! with the views where `psi < mu / 4` and `phi < mu / 1300`, and it is
//! accepted when more than `mu` views agree and its probability exceeds
//! `tau(mu) = 0.6 * exp((mu - 10) / 8)`.

use log::warn;
use nalgebra::{Point2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::cloud::{PointCloud, Provenance};
use crate::depth::DepthMap;
use crate::error::{MvsError, Result};

/// Reprojection and relative depth error of one reference pixel against one
/// source view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyRecord {
    pub psi: f64,
    pub phi: f64,
    /// Depth of the round-tripped point in the reference frame.
    pub depth_back: f64,
    pub valid: bool,
}

impl ConsistencyRecord {
    pub const INVALID: Self = Self {
        psi: f64::INFINITY,
        phi: f64::INFINITY,
        depth_back: f64::NAN,
        valid: false,
    };

    pub fn new(psi: f64, phi: f64) -> Self {
        Self {
            psi,
            phi,
            depth_back: f64::NAN,
            valid: true,
        }
    }

    fn passes(&self, epsilon: f64, eta: f64) -> bool {
        self.valid && self.psi < epsilon && self.phi < eta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Probability threshold `tau(mu)` grows with `mu`.
    Dynamic,
    /// Probability threshold `fixed_tau` for every `mu`.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub mu_min: usize,
    /// Largest `mu` tried; `None` means the number of source views.
    pub mu_max: Option<usize>,
    pub base_probability: f64,
    pub probability_scale: f64,
    pub pivot: f64,
    /// `epsilon(mu) = mu / reprojection_divisor` pixels.
    pub reprojection_divisor: f64,
    /// `eta(mu) = mu / depth_divisor`.
    pub depth_divisor: f64,
    pub fixed_tau: f64,
    /// Fuse the mean of the reference depth and the consistent views'
    /// round-trip depths instead of the reference depth alone.
    pub average_depths: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Dynamic,
            mu_min: 1,
            mu_max: None,
            base_probability: 0.6,
            probability_scale: 8.0,
            pivot: 10.0,
            reprojection_divisor: 4.0,
            depth_divisor: 1300.0,
            fixed_tau: 0.35,
            average_depths: true,
        }
    }
}

impl FusionConfig {
    pub fn fixed(tau: f64) -> Self {
        Self {
            mode: FusionMode::Fixed,
            fixed_tau: tau,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MvsError::Config(m));
        if self.mu_min < 1 {
            return bad("mu_min must be at least 1".into());
        }
        if let Some(hi) = self.mu_max {
            if hi < self.mu_min {
                return bad(format!("mu_max {hi} below mu_min {}", self.mu_min));
            }
        }
        for (name, v) in [
            ("base_probability", self.base_probability),
            ("probability_scale", self.probability_scale),
            ("reprojection_divisor", self.reprojection_divisor),
            ("depth_divisor", self.depth_divisor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !self.pivot.is_finite() {
            return bad(format!("pivot must be finite, got {}", self.pivot));
        }
        if !(self.fixed_tau >= 0.0 && self.fixed_tau.is_finite()) {
            return bad(format!("fixed_tau must be non-negative, got {}", self.fixed_tau));
        }
        Ok(())
    }

    pub fn epsilon(&self, mu: usize) -> f64 {
        mu as f64 / self.reprojection_divisor
    }

    pub fn eta(&self, mu: usize) -> f64 {
        mu as f64 / self.depth_divisor
    }

    /// Probability threshold at `mu` for the configured mode.
    pub fn tau(&self, mu: usize) -> f64 {
        match self.mode {
            FusionMode::Dynamic => self.base_probability * ((mu as f64 - self.pivot) / self.probability_scale).exp(),
            FusionMode::Fixed => self.fixed_tau,
        }
    }

    /// Inclusive `mu` range for `sources` source views.
    pub fn mu_range(&self, sources: usize) -> std::ops::RangeInclusive<usize> {
        let hi = self.mu_max.map_or(sources, |m| m.min(sources));
        self.mu_min..=hi
    }
}

/// `tau(mu)` with the default constants.
pub fn dynamic_threshold(mu: usize) -> f64 {
    FusionConfig::default().tau(mu)
}

/// Number of valid views with `psi < epsilon` and `phi < eta`.
pub fn static_consistency_set(records: &[ConsistencyRecord], epsilon: f64, eta: f64) -> usize {
    records.iter().filter(|r| r.passes(epsilon, eta)).count()
}

/// Acceptance with static thresholds.
pub fn fixed_accept(theta: f64, records: &[ConsistencyRecord], epsilon: f64, eta: f64, mu: usize, tau: f64) -> bool {
    static_consistency_set(records, epsilon, eta) > mu && theta > tau
}

/// Smallest `mu` in the configured range that accepts the pixel, if any.
pub fn dynamic_accept(theta: f64, records: &[ConsistencyRecord], cfg: &FusionConfig) -> Option<usize> {
    cfg.mu_range(records.len())
        .find(|&mu| fixed_accept(theta, records, cfg.epsilon(mu), cfg.eta(mu), mu, cfg.tau(mu)))
}

/// Round-trip errors of reference pixel `p` at depth `ref_depth` against a
/// source view. Source depths are looked up at the nearest pixel.
pub fn consistency_errors(
    p: Point2<f64>,
    ref_depth: f64,
    reference: &Camera,
    source: &Camera,
    source_depth: &DepthMap,
) -> ConsistencyRecord {
    let round_trip = || -> Option<ConsistencyRecord> {
        let world = reference.unproject(p, ref_depth).ok()?;
        let (q, _) = source.project(&world).ok()?;
        if !source.contains(q) {
            return None;
        }
        let (qx, qy) = (q.x.round() as usize, q.y.round() as usize);
        if qx >= source_depth.width || qy >= source_depth.height {
            return None;
        }
        let ds = source_depth.depth_at(qy, qx);
        let back = source.unproject(Point2::new(qx as f64, qy as f64), ds).ok()?;
        let (p_back, d_back) = reference.project(&back).ok()?;
        Some(ConsistencyRecord {
            psi: (p - p_back).norm(),
            phi: (d_back - ref_depth).abs() / ref_depth,
            depth_back: d_back,
            valid: true,
        })
    };
    round_trip().unwrap_or(ConsistencyRecord::INVALID)
}

/// Per-view and per-`mu` counts of one fusion run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub mode: FusionMode,
    pub points: usize,
    /// Pixels with a usable depth, per view.
    pub tested: Vec<usize>,
    pub accepted: Vec<usize>,
    /// `mu_histogram[mu]` counts pixels accepted at `mu`.
    pub mu_histogram: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub cloud: PointCloud,
    pub report: FusionReport,
}

fn check_inputs(cameras: &[Camera], maps: &[DepthMap]) -> Result<()> {
    if cameras.len() != maps.len() {
        return Err(MvsError::Invalid(format!(
            "{} cameras but {} depth maps",
            cameras.len(),
            maps.len()
        )));
    }
    for (i, (c, m)) in cameras.iter().zip(maps).enumerate() {
        if c.height() != m.height || c.width() != m.width {
            return Err(MvsError::Invalid(format!(
                "view {i}: camera is {}x{} but depth map is {}x{}",
                c.height(),
                c.width(),
                m.height,
                m.width
            )));
        }
    }
    Ok(())
}

fn usable(depth: f64) -> bool {
    depth > 0.0 && depth.is_finite()
}

fn pixel_records(cameras: &[Camera], maps: &[DepthMap], view: usize, y: usize, x: usize) -> Vec<ConsistencyRecord> {
    let p = Point2::new(x as f64, y as f64);
    let d = maps[view].depth_at(y, x);
    (0..cameras.len())
        .filter(|&s| s != view)
        .map(|s| consistency_errors(p, d, &cameras[view], &cameras[s], &maps[s]))
        .collect()
}

fn color_at(image: &[f64], hw: usize, i: usize) -> [u8; 3] {
    let channels = image.len() / hw;
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let v = image[c.min(channels - 1) * hw + i];
        *o = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    out
}

struct ViewPoints {
    tested: usize,
    points: Vec<([f64; 3], [u8; 3], Provenance)>,
}

fn fuse_view(
    cameras: &[Camera],
    images: &[&[f64]],
    maps: &[DepthMap],
    cfg: &FusionConfig,
    view: usize,
) -> Result<ViewPoints> {
    let map = &maps[view];
    let cam = &cameras[view];
    let hw = map.height * map.width;
    let mut out = ViewPoints {
        tested: 0,
        points: Vec::new(),
    };
    for y in 0..map.height {
        for x in 0..map.width {
            let d = map.depth_at(y, x);
            if !usable(d) {
                continue;
            }
            out.tested += 1;
            let records = pixel_records(cameras, maps, view, y, x);
            let Some(mu) = dynamic_accept(map.prob_at(y, x), &records, cfg) else {
                continue;
            };
            let fused = if cfg.average_depths {
                let (eps, eta) = (cfg.epsilon(mu), cfg.eta(mu));
                let (sum, n) = records
                    .iter()
                    .filter(|r| r.passes(eps, eta))
                    .fold((d, 1usize), |(s, n), r| (s + r.depth_back, n + 1));
                sum / n as f64
            } else {
                d
            };
            let point: Vector3<f64> = cam.unproject(Point2::new(x as f64, y as f64), fused)?;
            out.points.push((
                [point.x, point.y, point.z],
                color_at(images[view], hw, y * map.width + x),
                Provenance { view, x, y, mu },
            ));
        }
    }
    Ok(out)
}

/// Fuses per-view depth maps into one cloud. `images` are `[C,H,W]` planes
/// with values in `[0, 1]`. Points are ordered by view, then row, then column.
pub fn fuse(cameras: &[Camera], images: &[&[f64]], maps: &[DepthMap], cfg: &FusionConfig) -> Result<Fusion> {
    cfg.validate()?;
    check_inputs(cameras, maps)?;
    if images.len() != cameras.len() {
        return Err(MvsError::Invalid(format!("{} cameras but {} images", cameras.len(), images.len())));
    }
    for (i, (img, m)) in images.iter().zip(maps).enumerate() {
        let hw = m.height * m.width;
        if hw == 0 || img.is_empty() || img.len() % hw != 0 {
            return Err(MvsError::Invalid(format!("view {i}: image does not match its depth map")));
        }
    }
    let per_view: Vec<ViewPoints> = (0..cameras.len())
        .into_par_iter()
        .map(|v| fuse_view(cameras, images, maps, cfg, v))
        .collect::<Result<_>>()?;

    let sources = cameras.len().saturating_sub(1);
    let mut report = FusionReport {
        mode: cfg.mode,
        points: 0,
        tested: Vec::with_capacity(cameras.len()),
        accepted: Vec::with_capacity(cameras.len()),
        mu_histogram: vec![0; sources + 1],
    };
    let mut cloud = PointCloud::default();
    for vp in per_view {
        report.tested.push(vp.tested);
        report.accepted.push(vp.points.len());
        for (p, c, prov) in vp.points {
            report.mu_histogram[prov.mu] += 1;
            cloud.points.push(p);
            cloud.colors.push(c);
            cloud.provenance.push(prov);
        }
    }
    report.points = cloud.len();
    if cloud.is_empty() {
        warn!("fusion accepted no pixels");
    }
    Ok(Fusion { cloud, report })
}

/// Re-evaluates the acceptance test for every fused point: the recorded
/// `mu` must accept and no smaller `mu` may.
pub fn audit(cameras: &[Camera], maps: &[DepthMap], cfg: &FusionConfig, cloud: &PointCloud) -> Result<()> {
    check_inputs(cameras, maps)?;
    if cloud.provenance.len() != cloud.len() {
        return Err(MvsError::Invalid("cloud has no provenance to audit".into()));
    }
    for (i, prov) in cloud.provenance.iter().enumerate() {
        if prov.view >= maps.len() || prov.y >= maps[prov.view].height || prov.x >= maps[prov.view].width {
            return Err(MvsError::Invalid(format!("point {i}: provenance {prov:?} out of range")));
        }
        let records = pixel_records(cameras, maps, prov.view, prov.y, prov.x);
        let theta = maps[prov.view].prob_at(prov.y, prov.x);
        if dynamic_accept(theta, &records, cfg) != Some(prov.mu) {
            return Err(MvsError::Invalid(format!(
                "point {i}: pixel ({}, {}) of view {} does not re-accept at mu {}",
                prov.x, prov.y, prov.view, prov.mu
            )));
        }
        let (px, _) = cameras[prov.view].project(&Vector3::from(cloud.points[i]))?;
        let err = (px - Point2::new(prov.x as f64, prov.y as f64)).norm();
        if err > 1e-4 {
            return Err(MvsError::Invalid(format!("point {i} projects {err} px from its pixel")));
        }
    }
    Ok(())
}
