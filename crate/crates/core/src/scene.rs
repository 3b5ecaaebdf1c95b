//! Scenes: posed images with optional ground-truth depth, and synthetic
//! scene generation by analytic raycasting.

use nalgebra::{Matrix3, Point2, Vector3};
use nlmvs_tensor::{Scalar, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CameraView};
use crate::cloud::PointCloud;
use crate::depth::DepthMap;
use crate::error::{MvsError, Result};

/// Posed views sharing one depth range.
#[derive(Debug, Clone)]
pub struct Scene<T> {
    pub views: Vec<CameraView<T>>,
    pub d_min: f64,
    pub d_max: f64,
    /// Ground truth per view, validity stored as probability 1/0.
    pub gt_depths: Vec<Option<DepthMap>>,
}

impl<T: Scalar> Scene<T> {
    pub fn cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| v.camera.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Scene<U> {
        Scene {
            views: self
                .views
                .iter()
                .map(|v| CameraView {
                    camera: v.camera.clone(),
                    image: v.image.cast(),
                })
                .collect(),
            d_min: self.d_min,
            d_max: self.d_max,
            gt_depths: self.gt_depths.clone(),
        }
    }
}

/// Analytic surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Two fronto-parallel half-planes split at world `x = split_x`: depth
    /// `near` to the left, `far` to the right.
    TwoLevel {
        near: f64,
        far: f64,
        split_x: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub num_views: usize,
    pub height: usize,
    pub width: usize,
    /// Focal length in pixels; 0.9 times the width when absent.
    pub focal: Option<f64>,
    /// Radius of the ring of source camera centres around the reference.
    pub baseline: f64,
    pub d_min: f64,
    pub d_max: f64,
    /// Depth the source cameras look at; midway in inverse depth when absent.
    pub look_at_depth: Option<f64>,
    pub texture_seed: u64,
    /// Texture frequency in cycles per scene unit at the coarsest octave.
    pub texture_scale: f64,
    pub octaves: usize,
    /// Light direction (towards the light) in world coordinates.
    pub light: [f64; 3],
    pub ambient: f64,
    /// Minimum standard deviation of reference-image intensities.
    pub contrast_floor: f64,
    pub primitives: Vec<Primitive>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_views: 7,
            height: 64,
            width: 64,
            focal: None,
            baseline: 1.0,
            d_min: 6.0,
            d_max: 12.0,
            look_at_depth: None,
            texture_seed: 0,
            texture_scale: 1.5,
            octaves: 4,
            light: [-0.3, -0.4, -1.0],
            ambient: 0.35,
            contrast_floor: 0.03,
            primitives: vec![Primitive::Plane {
                point: [0.0, 0.0, 9.0],
                normal: [0.0, 0.0, -1.0],
            }],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MvsError::Config(m));
        if self.num_views < 2 {
            return bad(format!("need at least 2 views, got {}", self.num_views));
        }
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive".into());
        }
        if !(self.baseline.is_finite() && self.baseline > 0.0) {
            return Err(MvsError::Geometry(format!(
                "degenerate camera rig: baseline {} gives coincident camera centres",
                self.baseline
            )));
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min) {
            return bad(format!("invalid depth range [{}, {}]", self.d_min, self.d_max));
        }
        if self.focal.is_some_and(|f| f <= 0.0) {
            return bad("focal length must be positive".into());
        }
        if self.octaves == 0 || self.texture_scale <= 0.0 {
            return bad("texture needs at least one octave and a positive scale".into());
        }
        if self.primitives.is_empty() {
            return bad("scene has no primitives".into());
        }
        for p in &self.primitives {
            match p {
                Primitive::Plane { normal, .. } if Vector3::from(*normal).norm() == 0.0 => {
                    return bad("plane normal must be non-zero".into())
                }
                Primitive::Sphere { radius, .. } if *radius <= 0.0 => {
                    return bad("sphere radius must be positive".into())
                }
                Primitive::TwoLevel { near, far, .. } if *near <= 0.0 || *far <= 0.0 => {
                    return bad("two-level depths must be positive".into())
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn focal_px(&self) -> f64 {
        self.focal.unwrap_or(0.9 * self.width as f64)
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        let f = self.focal_px();
        Camera::intrinsics(
            f,
            f,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }

    /// Reference camera at the origin followed by `num_views - 1` cameras on
    /// a ring of radius `baseline`, all looking at the scene centre.
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        self.validate()?;
        let k = self.intrinsics();
        let (w, h) = (self.width, self.height);
        let target = Vector3::new(
            0.0,
            0.0,
            self.look_at_depth
                .unwrap_or(2.0 / (1.0 / self.d_min + 1.0 / self.d_max)),
        );
        let mut cams = vec![Camera::reference(k, w, h)?];
        let n = self.num_views - 1;
        for i in 0..n {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            let centre = Vector3::new(self.baseline * a.cos(), self.baseline * a.sin(), 0.0);
            let z = (target - centre).normalize();
            let x = Vector3::y().cross(&z).normalize();
            let y = z.cross(&x);
            let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
            cams.push(Camera::new(k, r, -(r * centre), w, h)?);
        }
        Ok(cams)
    }
}

/// Surface hit of a camera ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Camera-frame depth of the hit.
    pub depth: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
}

/// Closest hit along the ray through `pixel`, if any.
pub fn raycast(primitives: &[Primitive], cam: &Camera, pixel: Point2<f64>) -> Option<Hit> {
    let (o, d) = cam.ray(pixel);
    let mut best: Option<(f64, Vector3<f64>)> = None;
    let mut consider = |s: f64, n: Vector3<f64>| {
        if s > 0.0 && s.is_finite() && best.is_none_or(|(b, _)| s < b) {
            best = Some((s, n));
        }
    };
    for p in primitives {
        match *p {
            Primitive::Plane { point, normal } => {
                let n = Vector3::from(normal).normalize();
                let den = n.dot(&d);
                if den != 0.0 {
                    consider(n.dot(&(Vector3::from(point) - o)) / den, n);
                }
            }
            Primitive::Sphere { center, radius } => {
                let c = Vector3::from(center);
                let oc = o - c;
                let a = d.dot(&d);
                let b = 2.0 * d.dot(&oc);
                let q = oc.dot(&oc) - radius * radius;
                let disc = b * b - 4.0 * a * q;
                if disc >= 0.0 {
                    let sq = disc.sqrt();
                    // Numerically stable pair of roots.
                    let t = -0.5 * (b + b.signum() * sq);
                    let (r1, r2) = (t / a, q / t);
                    let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
                    let s = if lo > 0.0 { lo } else { hi };
                    consider(s, (o + d * s - c) / radius);
                }
            }
            Primitive::TwoLevel { near, far, split_x } => {
                let n = -Vector3::z();
                if d.z != 0.0 {
                    for (depth, left) in [(near, true), (far, false)] {
                        let s = (depth - o.z) / d.z;
                        let x = o.x + s * d.x;
                        if (x < split_x) == left {
                            consider(s, n);
                        }
                    }
                }
            }
        }
    }
    best.map(|(s, n)| {
        let point = o + d * s;
        let depth = (cam.rotation() * point + cam.translation()).z;
        Hit {
            depth,
            point,
            normal: if n.dot(&d) > 0.0 { -n } else { n },
        }
    })
}

fn hash(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn lattice(seed: u64, i: i64, j: i64, k: i64) -> f64 {
    let h = hash(seed ^ hash((i as u64) ^ hash((j as u64) ^ hash(k as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, p: Vector3<f64>) -> f64 {
    let f = p.map(f64::floor);
    let t = p - f;
    let s = t.map(|v| v * v * (3.0 - 2.0 * v));
    let (i, j, k) = (f.x as i64, f.y as i64, f.z as i64);
    let mut acc = 0.0;
    for (di, wx) in [(0, 1.0 - s.x), (1, s.x)] {
        for (dj, wy) in [(0, 1.0 - s.y), (1, s.y)] {
            for (dk, wz) in [(0, 1.0 - s.z), (1, s.z)] {
                acc += wx * wy * wz * lattice(seed, i + di, j + dj, k + dk);
            }
        }
    }
    acc
}

/// Octave sum of value noise normalised to [0, 1].
fn fbm(seed: u64, p: Vector3<f64>, octaves: usize) -> f64 {
    let (mut sum, mut norm, mut amp, mut freq) = (0.0, 0.0, 1.0, 1.0);
    for o in 0..octaves {
        sum += amp * value_noise(hash(seed.wrapping_add(o as u64)), p * freq);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    sum / norm
}

impl SceneSpec {
    /// Surface reflectance per channel at a world point, in [0.1, 0.9].
    pub fn albedo(&self, p: &Vector3<f64>) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (c, v) in out.iter_mut().enumerate() {
            let seed = hash(self.texture_seed.wrapping_mul(3).wrapping_add(c as u64));
            let n = fbm(seed, p * self.texture_scale, self.octaves);
            // Stretch the concentrated octave sum before clamping.
            *v = (0.5 + 1.6 * (n - 0.5)).clamp(0.0, 1.0) * 0.8 + 0.1;
        }
        out
    }

    fn shade(&self, hit: &Hit) -> [f64; 3] {
        let l = Vector3::from(self.light).normalize();
        let lambert = hit.normal.dot(&l).max(0.0);
        let k = self.ambient + (1.0 - self.ambient) * lambert;
        self.albedo(&hit.point).map(|a| (a * k).clamp(0.0, 1.0))
    }
}

fn quantize(v: f64) -> f64 {
    (v * 255.0).round() / 255.0
}

/// Rendered view with exact depth.
#[derive(Debug, Clone)]
pub struct RenderedView {
    /// `[3, H, W]` in [0, 1], quantized to 8 bits.
    pub image: Tensor<f64>,
    pub depth: DepthMap,
}

pub fn render_view(spec: &SceneSpec, cam: &Camera) -> RenderedView {
    let (h, w) = (cam.height(), cam.width());
    let hits: Vec<Option<Hit>> = (0..h * w)
        .into_par_iter()
        .map(|i| raycast(&spec.primitives, cam, Point2::new((i % w) as f64, (i / w) as f64)))
        .collect();
    let mut image = Tensor::zeros(&[3, h, w]);
    let mut depth = vec![0.0; h * w];
    let mut prob = vec![0.0; h * w];
    for (i, hit) in hits.iter().enumerate() {
        if let Some(hit) = hit {
            let rgb = spec.shade(hit);
            for (c, v) in rgb.iter().enumerate() {
                image.data_mut()[c * h * w + i] = quantize(*v);
            }
            depth[i] = hit.depth;
            prob[i] = 1.0;
        }
    }
    RenderedView {
        image,
        depth: DepthMap::new(h, w, depth, prob).expect("sizes match"),
    }
}

/// Surface samples seen by a camera: 2x2 sub-pixel rays per pixel.
pub fn surface_samples(spec: &SceneSpec, cam: &Camera) -> Vec<[f64; 3]> {
    let (h, w) = (cam.height(), cam.width());
    let offsets = [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)];
    (0..h * w)
        .into_par_iter()
        .flat_map_iter(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            offsets.iter().filter_map(move |(dx, dy)| {
                raycast(&spec.primitives, cam, Point2::new(x + dx, y + dy)).map(|hit| hit.point.into())
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SyntheticScene<T> {
    pub spec: SceneSpec,
    pub scene: Scene<T>,
    /// Union of every view's sub-pixel surface samples.
    pub gt_cloud: PointCloud,
}

pub fn generate_scene<T: Scalar>(spec: &SceneSpec) -> Result<SyntheticScene<T>> {
    let cams = spec.cameras()?;
    let rendered: Vec<RenderedView> = cams.iter().map(|c| render_view(spec, c)).collect();
    let reference = &rendered[0];
    let lum: Vec<f64> = (0..reference.depth.len())
        .filter(|&i| reference.depth.prob[i] > 0.0)
        .map(|i| (0..3).map(|c| reference.image.data()[c * reference.depth.len() + i]).sum::<f64>() / 3.0)
        .collect();
    if lum.is_empty() {
        return Err(MvsError::Invalid("reference view sees no surface".into()));
    }
    let mean = lum.iter().sum::<f64>() / lum.len() as f64;
    let std = (lum.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / lum.len() as f64).sqrt();
    if std < spec.contrast_floor {
        return Err(MvsError::Invalid(format!(
            "texture contrast {std:.4} below floor {}",
            spec.contrast_floor
        )));
    }
    let mut points = Vec::new();
    for c in &cams {
        points.extend(surface_samples(spec, c));
    }
    let views = cams
        .into_iter()
        .zip(&rendered)
        .map(|(camera, r)| CameraView::new(camera, r.image.cast()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticScene {
        spec: spec.clone(),
        scene: Scene {
            views,
            d_min: spec.d_min,
            d_max: spec.d_max,
            gt_depths: rendered.into_iter().map(|r| Some(r.depth)).collect(),
        },
        gt_cloud: PointCloud::from_points(points),
    })
}
