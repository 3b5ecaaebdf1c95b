//! Bilinear sampling of `[C, H, W]` maps at arbitrary coordinates with a
//! zero border. Used for homography warping of feature maps.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sampling positions `(x, y)` in input pixel coordinates, one per output
/// pixel, row-major over an `out_h x out_w` grid. Pixel `(x, y)` of the
/// input sits at continuous coordinate `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    pub out_h: usize,
    pub out_w: usize,
    pub coords: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    base: usize,
    step_x: usize,
    step_y: usize,
    fx: f64,
    fy: f64,
}

impl SampleGrid {
    pub fn new(out_h: usize, out_w: usize, coords: Vec<(f64, f64)>) -> Result<Self> {
        if coords.len() != out_h * out_w {
            return Err(shape_err(
                "SampleGrid",
                format!("{} coordinates for {out_h}x{out_w} grid", coords.len()),
            ));
        }
        Ok(Self { out_h, out_w, coords })
    }

    /// Identity grid shifted by `(dx, dy)`.
    pub fn translation(h: usize, w: usize, dx: f64, dy: f64) -> Self {
        let coords = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x as f64 + dx, y as f64 + dy)))
            .collect();
        Self { out_h: h, out_w: w, coords }
    }

    pub(crate) fn taps(&self, h: usize, w: usize) -> Vec<Option<Tap>> {
        self.coords
            .iter()
            .map(|&(x, y)| {
                let inside = x.is_finite()
                    && y.is_finite()
                    && x >= 0.0
                    && y >= 0.0
                    && x <= (w - 1) as f64
                    && y <= (h - 1) as f64;
                if !inside {
                    return None;
                }
                let x0 = (x.floor() as usize).min(w - 1);
                let y0 = (y.floor() as usize).min(h - 1);
                Some(Tap {
                    base: y0 * w + x0,
                    step_x: usize::from(x0 + 1 < w),
                    step_y: if y0 + 1 < h { w } else { 0 },
                    fx: x - x0 as f64,
                    fy: y - y0 as f64,
                })
            })
            .collect()
    }
}

/// Returns the sampled map `[C, out_h, out_w]` and validity mask
/// `[1, out_h, out_w]` (1 where the sample lies inside the input).
pub fn bilinear_sample<T: Scalar>(input: &Tensor<T>, grid: &SampleGrid) -> Result<(Tensor<T>, Tensor<T>)> {
    if input.rank() != 3 || input.shape()[1] == 0 || input.shape()[2] == 0 {
        return Err(shape_err("bilinear_sample", format!("input {:?}", input.shape())));
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let taps = grid.taps(h, w);
    let np = grid.out_h * grid.out_w;
    let x = input.data();
    let mut out = vec![T::zero(); c * np];
    let mut mask = vec![T::zero(); np];
    for (p, tap) in taps.iter().enumerate() {
        let Some(t) = tap else { continue };
        mask[p] = T::one();
        let (fx, fy) = (T::of(t.fx), T::of(t.fy));
        for ci in 0..c {
            let plane = &x[ci * h * w..];
            let v00 = plane[t.base];
            let v01 = plane[t.base + t.step_x];
            let v10 = plane[t.base + t.step_y];
            let v11 = plane[t.base + t.step_y + t.step_x];
            let top = v00 + (v01 - v00) * fx;
            let bot = v10 + (v11 - v10) * fx;
            out[ci * np + p] = top + (bot - top) * fy;
        }
    }
    Ok((
        Tensor::new(&[c, grid.out_h, grid.out_w], out)?,
        Tensor::new(&[1, grid.out_h, grid.out_w], mask)?,
    ))
}

pub(crate) fn bilinear_sample_backward<T: Scalar>(
    in_shape: &[usize],
    grid: &SampleGrid,
    dout: &Tensor<T>,
) -> Tensor<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let taps = grid.taps(h, w);
    let np = grid.out_h * grid.out_w;
    let dy = dout.data();
    let mut dx = vec![T::zero(); c * h * w];
    let one = T::one();
    for (p, tap) in taps.iter().enumerate() {
        let Some(t) = tap else { continue };
        let (fx, fy) = (T::of(t.fx), T::of(t.fy));
        for ci in 0..c {
            let g = dy[ci * np + p];
            let plane = &mut dx[ci * h * w..];
            plane[t.base] += g * (one - fx) * (one - fy);
            plane[t.base + t.step_x] += g * fx * (one - fy);
            plane[t.base + t.step_y] += g * (one - fx) * fy;
            plane[t.base + t.step_y + t.step_x] += g * fx * fy;
        }
    }
    Tensor::new(in_shape, dx).expect("shape")
}
