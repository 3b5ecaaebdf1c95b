//! 2D cross-correlation via im2col + GEMM.

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: 0,
        }
    }
}

impl Conv2dOpts {
    /// Padding that keeps the spatial size for stride 1.
    pub fn same(k: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            padding: dilation * (k - 1) / 2,
        }
    }

    pub fn strided(k: usize, stride: usize) -> Self {
        Self {
            stride,
            dilation: 1,
            padding: (k - 1) / 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub opts: Conv2dOpts,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, opts: Conv2dOpts) -> Result<Self> {
        if input.rank() != 3 || weight.rank() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("input {:?}, weight {:?}", input.shape(), weight.shape()),
            ));
        }
        let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (cout, wcin, k, k2) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        if wcin != cin || k != k2 {
            return Err(shape_err(
                "conv2d",
                format!("input {:?} vs weight {:?}", input.shape(), weight.shape()),
            ));
        }
        if k % 2 == 0 {
            return Err(invalid("conv2d", format!("kernel size {k} must be odd")));
        }
        if opts.stride == 0 || opts.dilation == 0 {
            return Err(invalid("conv2d", "stride and dilation must be positive"));
        }
        let span = opts.dilation * (k - 1) + 1;
        if h + 2 * opts.padding < span || w + 2 * opts.padding < span {
            return Err(shape_err("conv2d", "kernel larger than padded input"));
        }
        let ho = (h + 2 * opts.padding - span) / opts.stride + 1;
        let wo = (w + 2 * opts.padding - span) / opts.stride + 1;
        Ok(Self {
            cin,
            h,
            w,
            cout,
            k,
            opts,
            ho,
            wo,
        })
    }

    fn kdim(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn npix(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.opts.stride == 1 && self.opts.padding == 0
    }

    /// Output-column range `[lo, hi)` whose input column `ox*stride + off`
    /// falls inside `[0, extent)`.
    fn valid_range(out: usize, stride: usize, off: isize, extent: usize) -> (usize, usize) {
        let s = stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = if (extent as isize) <= off {
            0
        } else {
            ((extent as isize - off + s - 1) / s).min(out as isize)
        };
        let lo = lo.min(out as isize) as usize;
        (lo, (hi.max(lo as isize)) as usize)
    }

    fn im2col<T: Scalar>(&self, input: &[T], col: &mut [T]) {
        let (k, st, dil, pad) = (self.k, self.opts.stride, self.opts.dilation, self.opts.padding);
        let np = self.npix();
        for ci in 0..self.cin {
            let plane = &input[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * np..(row + 1) * np];
                    let offy = (ky * dil) as isize - pad as isize;
                    let offx = (kx * dil) as isize - pad as isize;
                    let (xlo, xhi) = Self::valid_range(self.wo, st, offx, self.w);
                    for oy in 0..self.ho {
                        let iy = (oy * st) as isize + offy;
                        let drow = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        drow[..xlo].fill(T::zero());
                        drow[xhi..].fill(T::zero());
                        if st == 1 {
                            let s0 = (xlo as isize + offx) as usize;
                            drow[xlo..xhi].copy_from_slice(&src[s0..s0 + (xhi - xlo)]);
                        } else {
                            for ox in xlo..xhi {
                                drow[ox] = src[((ox * st) as isize + offx) as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], dinput: &mut [T]) {
        let (k, st, dil, pad) = (self.k, self.opts.stride, self.opts.dilation, self.opts.padding);
        let np = self.npix();
        for ci in 0..self.cin {
            let plane = &mut dinput[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * np..(row + 1) * np];
                    let offy = (ky * dil) as isize - pad as isize;
                    let offx = (kx * dil) as isize - pad as isize;
                    let (xlo, xhi) = Self::valid_range(self.wo, st, offx, self.w);
                    for oy in 0..self.ho {
                        let iy = (oy * st) as isize + offy;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let srow = &src[oy * self.wo..(oy + 1) * self.wo];
                        for ox in xlo..xhi {
                            drow[((ox * st) as isize + offx) as usize] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `input [Cin,H,W]` with `weight [Cout,Cin,k,k]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    opts: Conv2dOpts,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, weight, opts)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(shape_err(
                "conv2d",
                format!("bias {:?} for {} output channels", b.shape(), g.cout),
            ));
        }
    }
    let np = g.npix();
    let kd = g.kdim();
    let mut out = vec![T::zero(); g.cout * np];
    if let Some(b) = bias {
        for (co, &bv) in b.data().iter().enumerate() {
            out[co * np..(co + 1) * np].fill(bv);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    if g.is_pointwise() {
        T::gemm(g.cout, kd, np, T::one(), weight.data(), (kd as isize, 1), input.data(), (np as isize, 1), beta, &mut out, (np as isize, 1));
    } else {
        T::with_scratch(kd * np, |col| {
            g.im2col(input.data(), col);
            T::gemm(g.cout, kd, np, T::one(), weight.data(), (kd as isize, 1), col, (np as isize, 1), beta, &mut out, (np as isize, 1));
        });
    }
    Tensor::new(&[g.cout, g.ho, g.wo], out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    opts: Conv2dOpts,
    dout: &Tensor<T>,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(input, weight, opts)?;
    let np = g.npix();
    let kd = g.kdim();
    let (need_x, need_w, need_b) = need;
    let weight_grad = if need_w {
        // dW[Cout,K] = dOut[Cout,P] * col^T
        let mut dw = vec![T::zero(); g.cout * kd];
        let mut grad = |col: &[T]| {
            T::gemm(g.cout, np, kd, T::one(), dout.data(), (np as isize, 1), col, (1, np as isize), T::zero(), &mut dw, (kd as isize, 1));
        };
        if g.is_pointwise() {
            grad(input.data());
        } else {
            T::with_scratch(kd * np, |col| {
                g.im2col(input.data(), col);
                grad(col);
            });
        }
        Some(Tensor::new(weight.shape(), dw)?)
    } else {
        None
    };
    let input_grad = if need_x {
        // dcol[K,P] = W^T * dOut
        let mut dx = vec![T::zero(); g.cin * g.h * g.w];
        if g.is_pointwise() {
            T::gemm(kd, g.cout, np, T::one(), weight.data(), (1, kd as isize), dout.data(), (np as isize, 1), T::zero(), &mut dx, (np as isize, 1));
        } else {
            T::with_scratch(kd * np, |dcol| {
                T::gemm(kd, g.cout, np, T::one(), weight.data(), (1, kd as isize), dout.data(), (np as isize, 1), T::zero(), dcol, (np as isize, 1));
                g.col2im(dcol, &mut dx);
            });
        }
        Some(Tensor::new(input.shape(), dx)?)
    } else {
        None
    };
    let bias_grad = if need_b {
        let db: Vec<T> = (0..g.cout)
            .map(|co| dout.data()[co * np..(co + 1) * np].iter().copied().sum())
            .collect();
        Some(Tensor::new(&[g.cout], db)?)
    } else {
        None
    };
    Ok(ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    })
}
