//! Pinhole cameras, inverse-depth plane sampling and plane-sweep homographies.
//!
//! Poses map world to camera coordinates, `X_cam = R * X_world + t`. Pixel
//! `(x, y)` is centred on the continuous coordinate `(x, y)`.

use std::sync::Arc;

use nalgebra::{Matrix3, Point2, Vector3};
use nlmvs_tensor::{SampleGrid, Scalar, Tape, Tensor, Var};

use crate::error::{MvsError, Result};

const ROTATION_TOL: f64 = 1e-6;

/// Intrinsics and extrinsics of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    k: Matrix3<f64>,
    k_inv: Matrix3<f64>,
    r: Matrix3<f64>,
    t: Vector3<f64>,
    width: usize,
    height: usize,
}

impl Camera {
    pub fn new(k: Matrix3<f64>, r: Matrix3<f64>, t: Vector3<f64>, width: usize, height: usize) -> Result<Self> {
        let upper = k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0 && k[(2, 2)] == 1.0;
        if !upper || k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(MvsError::Geometry(format!(
                "intrinsics must be upper-triangular with positive focal lengths: {k}"
            )));
        }
        let k_inv = k
            .try_inverse()
            .ok_or_else(|| MvsError::Geometry("singular intrinsics".into()))?;
        let orth = (r * r.transpose() - Matrix3::identity()).abs().max();
        if orth > ROTATION_TOL || (r.determinant() - 1.0).abs() > ROTATION_TOL {
            return Err(MvsError::Geometry(format!(
                "rotation is not orthonormal with det 1 (deviation {orth:e}, det {})",
                r.determinant()
            )));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(MvsError::Geometry("non-finite translation".into()));
        }
        if width == 0 || height == 0 {
            return Err(MvsError::Geometry("empty image extent".into()));
        }
        Ok(Self {
            k,
            k_inv,
            r,
            t,
            width,
            height,
        })
    }

    /// Camera at the world origin looking down `+z`.
    pub fn reference(k: Matrix3<f64>, width: usize, height: usize) -> Result<Self> {
        Self::new(k, Matrix3::identity(), Vector3::zeros(), width, height)
    }

    pub fn intrinsics(focal_x: f64, focal_y: f64, cx: f64, cy: f64) -> Matrix3<f64> {
        Matrix3::new(focal_x, 0.0, cx, 0.0, focal_y, cy, 0.0, 0.0, 1.0)
    }

    pub fn k(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn k_inv(&self) -> &Matrix3<f64> {
        &self.k_inv
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.t
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    pub fn contains(&self, px: Point2<f64>) -> bool {
        px.x >= -0.5 && px.y >= -0.5 && px.x < self.width as f64 - 0.5 && px.y < self.height as f64 - 0.5
    }

    /// Projects a world point; fails for points on or behind the image plane.
    pub fn project(&self, point: &Vector3<f64>) -> Result<(Point2<f64>, f64)> {
        let pc = self.r * point + self.t;
        if pc.z <= 0.0 {
            return Err(MvsError::Geometry(format!("point behind camera (depth {})", pc.z)));
        }
        let h = self.k * pc;
        Ok((Point2::new(h.x / h.z, h.y / h.z), pc.z))
    }

    /// Back-projects a pixel at camera-frame depth `depth` into world space.
    pub fn unproject(&self, pixel: Point2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if depth <= 0.0 || !depth.is_finite() {
            return Err(MvsError::Geometry(format!("unproject at non-positive depth {depth}")));
        }
        let ray = self.k_inv * Vector3::new(pixel.x, pixel.y, 1.0);
        let pc = ray * (depth / ray.z);
        Ok(self.r.transpose() * (pc - self.t))
    }

    /// World-space ray direction through a pixel, scaled so that the point at
    /// parameter `s` has camera depth `s`.
    pub fn ray(&self, pixel: Point2<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let d = self.k_inv * Vector3::new(pixel.x, pixel.y, 1.0);
        let d = d / d.z;
        (self.center(), self.r.transpose() * d)
    }
}

/// Relative pose mapping `src`-less reference coordinates into `src`:
/// `R_rel = R_src R_ref^T`, `t_rel = t_src - R_rel t_ref`.
pub fn relative_pose(reference: &Camera, source: &Camera) -> (Matrix3<f64>, Vector3<f64>) {
    let r_rel = source.r * reference.r.transpose();
    let t_rel = source.t - r_rel * reference.t;
    (r_rel, t_rel)
}

/// Homography induced by the fronto-parallel plane `z = depth` of the
/// reference camera, mapping reference pixels to source pixels:
/// `K_src (R_rel + t_rel n^T / d) K_ref^-1` with `n = (0, 0, 1)`.
pub fn plane_homography(reference: &Camera, source: &Camera, depth: f64) -> Result<Matrix3<f64>> {
    if depth <= 0.0 || !depth.is_finite() {
        return Err(MvsError::Geometry(format!("plane depth must be positive, got {depth}")));
    }
    let (r_rel, t_rel) = relative_pose(reference, source);
    let n = Vector3::new(0.0, 0.0, 1.0);
    Ok(source.k * (r_rel + t_rel * n.transpose() / depth) * reference.k_inv)
}

/// Rectangular window of reference pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelWindow {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

impl PixelWindow {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            y0: 0,
            x0: 0,
            height,
            width,
        }
    }
}

/// Source sampling positions for each reference pixel in `window`.
pub fn homography_grid(h: &Matrix3<f64>, window: PixelWindow) -> SampleGrid {
    let mut coords = Vec::with_capacity(window.height * window.width);
    for y in window.y0..window.y0 + window.height {
        for x in window.x0..window.x0 + window.width {
            let p = h * Vector3::new(x as f64, y as f64, 1.0);
            if p.z <= 0.0 {
                coords.push((f64::NAN, f64::NAN));
            } else {
                coords.push((p.x / p.z, p.y / p.z));
            }
        }
    }
    SampleGrid {
        out_h: window.height,
        out_w: window.width,
        coords,
    }
}

/// Warps source features into the reference window through `h`. Samples
/// outside the source image are zero with mask 0.
pub fn warp_features<T: Scalar>(
    tape: &mut Tape<T>,
    src_feat: Var,
    h: &Matrix3<f64>,
    window: PixelWindow,
) -> Result<(Var, Tensor<T>)> {
    let grid = Arc::new(homography_grid(h, window));
    Ok(tape.sample(src_feat, grid)?)
}

/// A camera with its `[3, H, W]` image in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct CameraView<T> {
    pub camera: Camera,
    pub image: Tensor<T>,
}

impl<T: Scalar> CameraView<T> {
    pub fn new(camera: Camera, image: Tensor<T>) -> Result<Self> {
        if image.shape() != [3, camera.height, camera.width] {
            return Err(MvsError::Invalid(format!(
                "image shape {:?} does not match camera {}x{}",
                image.shape(),
                camera.height,
                camera.width
            )));
        }
        Ok(Self { camera, image })
    }
}

/// Depth planes sampled uniformly in inverse depth, listed by increasing depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthHypothesisSet {
    d_min: f64,
    d_max: f64,
    values: Vec<f64>,
}

impl DepthHypothesisSet {
    pub fn d_min(&self) -> f64 {
        self.d_min
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the plane nearest to `depth` in inverse-depth space.
    pub fn nearest_index(&self, depth: f64) -> usize {
        let inv = 1.0 / depth;
        let (a, b) = (1.0 / self.d_min, 1.0 / self.d_max);
        // Planes are uniform in inverse depth from 1/d_min (index 0) down to 1/d_max.
        let pos = (a - inv) / (a - b) * (self.values.len() - 1) as f64;
        pos.round().clamp(0.0, (self.values.len() - 1) as f64) as usize
    }

    /// Depth gap between the planes around `depth`.
    pub fn spacing_at(&self, depth: f64) -> f64 {
        let step = (1.0 / self.d_min - 1.0 / self.d_max) / (self.values.len() - 1) as f64;
        depth * depth * step
    }
}

/// `values[j] = 1 / (1/d_min + j (1/d_max - 1/d_min) / (D - 1))`.
pub fn sample_inverse_depth(d_min: f64, d_max: f64, count: usize) -> Result<DepthHypothesisSet> {
    if !(d_min > 0.0 && d_max > d_min && d_max.is_finite()) {
        return Err(MvsError::Invalid(format!(
            "depth range must satisfy 0 < d_min < d_max, got [{d_min}, {d_max}]"
        )));
    }
    if count < 2 {
        return Err(MvsError::Invalid(format!("need at least 2 depth planes, got {count}")));
    }
    let (a, b) = (1.0 / d_min, 1.0 / d_max);
    let n = (count - 1) as f64;
    let mut values: Vec<f64> = (0..count).map(|j| 1.0 / (a + j as f64 * (b - a) / n)).collect();
    values[0] = d_min;
    values[count - 1] = d_max;
    Ok(DepthHypothesisSet { d_min, d_max, values })
}
