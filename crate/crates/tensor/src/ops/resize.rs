//! Bilinear resizing with half-pixel centers (`align_corners = false`).

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct AxisTap {
    i0: usize,
    i1: usize,
    frac: f64,
}

fn axis_taps(input: usize, output: usize) -> Vec<AxisTap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            AxisTap {
                i0,
                i1,
                frac: src - i0 as f64,
            }
        })
        .collect()
}

fn check<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<()> {
    if input.rank() != 3 || input.shape()[1] == 0 || input.shape()[2] == 0 {
        return Err(shape_err("bilinear_resize", format!("input {:?}", input.shape())));
    }
    if out_h == 0 || out_w == 0 {
        return Err(invalid("bilinear_resize", "output extents must be positive"));
    }
    Ok(())
}

pub fn bilinear_resize<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    check(input, out_h, out_w)?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let x = input.data();
    let mut out = vec![T::zero(); c * out_h * out_w];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            let fy = T::of(a.frac);
            for (ox, b) in tx.iter().enumerate() {
                let fx = T::of(b.frac);
                let v00 = plane[a.i0 * w + b.i0];
                let v01 = plane[a.i0 * w + b.i1];
                let v10 = plane[a.i1 * w + b.i0];
                let v11 = plane[a.i1 * w + b.i1];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out[(ci * out_h + oy) * out_w + ox] = top + (bot - top) * fy;
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

pub(crate) fn bilinear_resize_backward<T: Scalar>(in_shape: &[usize], dout: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (out_h, out_w) = (dout.shape()[1], dout.shape()[2]);
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let dy = dout.data();
    let mut dx = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            let fy = T::of(a.frac);
            for (ox, b) in tx.iter().enumerate() {
                let fx = T::of(b.frac);
                let g = dy[(ci * out_h + oy) * out_w + ox];
                let one = T::one();
                plane[a.i0 * w + b.i0] += g * (one - fy) * (one - fx);
                plane[a.i0 * w + b.i1] += g * (one - fy) * fx;
                plane[a.i1 * w + b.i0] += g * fy * (one - fx);
                plane[a.i1 * w + b.i1] += g * fy * fx;
            }
        }
    }
    Tensor::new(in_shape, dx).expect("shape")
}
