//! Reductions along the depth axis: pooling and softmax.

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Reduces `[C, Ds, H, W]` over `Ds`. For max pooling also returns the
/// winning depth index per output element (first maximum on ties).
pub(crate) fn pool_depth_with_index<T: Scalar>(
    input: &Tensor<T>,
    mode: PoolMode,
) -> Result<(Tensor<T>, Vec<u32>)> {
    if input.rank() != 4 {
        return Err(shape_err("pool_depth", format!("input {:?}", input.shape())));
    }
    let s = input.shape();
    let (c, ds, hw) = (s[0], s[1], s[2] * s[3]);
    if ds == 0 {
        return Err(invalid("pool_depth", "empty depth axis"));
    }
    let x = input.data();
    let mut out = vec![T::zero(); c * hw];
    let mut arg = Vec::new();
    match mode {
        PoolMode::Max => {
            arg = vec![0u32; c * hw];
            for ci in 0..c {
                for p in 0..hw {
                    let base = ci * ds * hw + p;
                    let mut best = x[base];
                    let mut bi = 0;
                    for d in 1..ds {
                        let v = x[base + d * hw];
                        if v > best {
                            best = v;
                            bi = d;
                        }
                    }
                    out[ci * hw + p] = best;
                    arg[ci * hw + p] = bi as u32;
                }
            }
        }
        PoolMode::Avg => {
            let inv = T::one() / T::of(ds as f64);
            for ci in 0..c {
                for p in 0..hw {
                    let base = ci * ds * hw + p;
                    let mut acc = T::zero();
                    for d in 0..ds {
                        acc += x[base + d * hw];
                    }
                    out[ci * hw + p] = acc * inv;
                }
            }
        }
    }
    Ok((Tensor::new(&[c, s[2], s[3]], out)?, arg))
}

pub fn pool_depth<T: Scalar>(input: &Tensor<T>, mode: PoolMode) -> Result<Tensor<T>> {
    pool_depth_with_index(input, mode).map(|(t, _)| t)
}

pub(crate) fn pool_depth_backward<T: Scalar>(
    in_shape: &[usize],
    mode: PoolMode,
    arg: &[u32],
    dout: &Tensor<T>,
) -> Tensor<T> {
    let (c, ds, hw) = (in_shape[0], in_shape[1], in_shape[2] * in_shape[3]);
    let mut dx = vec![T::zero(); c * ds * hw];
    let dy = dout.data();
    match mode {
        PoolMode::Max => {
            for ci in 0..c {
                for p in 0..hw {
                    let d = arg[ci * hw + p] as usize;
                    dx[ci * ds * hw + d * hw + p] = dy[ci * hw + p];
                }
            }
        }
        PoolMode::Avg => {
            let inv = T::one() / T::of(ds as f64);
            for ci in 0..c {
                for d in 0..ds {
                    for p in 0..hw {
                        dx[ci * ds * hw + d * hw + p] = dy[ci * hw + p] * inv;
                    }
                }
            }
        }
    }
    Tensor::new(in_shape, dx).expect("shape")
}

fn depth_volume_dims<T: Scalar>(op: &'static str, v: &Tensor<T>) -> Result<(usize, usize)> {
    if v.rank() != 3 || v.shape()[0] == 0 {
        return Err(shape_err(op, format!("expected [D,H,W], got {:?}", v.shape())));
    }
    Ok((v.shape()[0], v.shape()[1] * v.shape()[2]))
}

/// Softmax along axis 0 of a `[D, H, W]` volume, max-subtracted.
pub fn softmax_depth<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (d, hw) = depth_volume_dims("softmax_depth", logits)?;
    let x = logits.data();
    let mut out = vec![T::zero(); x.len()];
    for p in 0..hw {
        let m = (0..d).map(|k| x[k * hw + p]).fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for k in 0..d {
            let e = (x[k * hw + p] - m).exp();
            out[k * hw + p] = e;
            z += e;
        }
        let inv = T::one() / z;
        for k in 0..d {
            out[k * hw + p] *= inv;
        }
    }
    Tensor::new(logits.shape(), out)
}

pub fn log_softmax_depth<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (d, hw) = depth_volume_dims("log_softmax_depth", logits)?;
    let x = logits.data();
    let mut out = vec![T::zero(); x.len()];
    for p in 0..hw {
        let m = (0..d).map(|k| x[k * hw + p]).fold(T::neg_infinity(), T::max);
        let z: T = (0..d).map(|k| (x[k * hw + p] - m).exp()).sum();
        let lse = m + z.ln();
        for k in 0..d {
            out[k * hw + p] = x[k * hw + p] - lse;
        }
    }
    Tensor::new(logits.shape(), out)
}

pub(crate) fn softmax_depth_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (d, hw) = (y.shape()[0], y.shape()[1] * y.shape()[2]);
    let (yv, g) = (y.data(), dy.data());
    let mut dx = vec![T::zero(); yv.len()];
    for p in 0..hw {
        let dot: T = (0..d).map(|k| yv[k * hw + p] * g[k * hw + p]).sum();
        for k in 0..d {
            let i = k * hw + p;
            dx[i] = yv[i] * (g[i] - dot);
        }
    }
    Tensor::new(y.shape(), dx).expect("shape")
}

pub(crate) fn log_softmax_depth_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (d, hw) = (y.shape()[0], y.shape()[1] * y.shape()[2]);
    let (yv, g) = (y.data(), dy.data());
    let mut dx = vec![T::zero(); yv.len()];
    for p in 0..hw {
        let gs: T = (0..d).map(|k| g[k * hw + p]).sum();
        for k in 0..d {
            let i = k * hw + p;
            dx[i] = g[i] - yv[i].exp() * gs;
        }
    }
    Tensor::new(y.shape(), dx).expect("shape")
}
