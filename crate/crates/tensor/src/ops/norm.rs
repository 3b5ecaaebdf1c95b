//! Group normalization over `[C, H, W]` maps.

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Per-group statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct GroupStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn check<T: Scalar>(
    input: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<()> {
    if input.rank() != 3 {
        return Err(shape_err("group_norm", format!("input {:?}", input.shape())));
    }
    let c = input.shape()[0];
    if groups == 0 || c % groups != 0 {
        return Err(invalid(
            "group_norm",
            format!("{c} channels not divisible by {groups} groups"),
        ));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(
            "group_norm",
            format!("gamma {:?} / beta {:?} for {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    Ok(())
}

/// Zero-mean / unit-variance per channel group, then per-channel affine.
pub fn group_norm<T: Scalar>(
    input: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    group_norm_with_stats(input, groups, gamma, beta).map(|(y, _)| y)
}

pub(crate) fn group_norm_with_stats<T: Scalar>(
    input: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, GroupStats<T>)> {
    check(input, groups, gamma, beta)?;
    let c = input.shape()[0];
    let hw = input.shape()[1] * input.shape()[2];
    let cpg = c / groups;
    let n = T::of((cpg * hw) as f64);
    let eps = T::of(GROUP_NORM_EPS);
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    let mut stats = GroupStats {
        mean: Vec::with_capacity(groups),
        rstd: Vec::with_capacity(groups),
    };
    for g in 0..groups {
        let seg = &x[g * cpg * hw..(g + 1) * cpg * hw];
        let mean = seg.iter().copied().sum::<T>() / n;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        for cc in 0..cpg {
            let ch = g * cpg + cc;
            let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
            for i in ch * hw..(ch + 1) * hw {
                out[i] = (x[i] - mean) * rstd * ga + be;
            }
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((Tensor::new(input.shape(), out)?, stats))
}

pub(crate) fn group_norm_backward<T: Scalar>(
    input: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    stats: &GroupStats<T>,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = input.shape()[0];
    let hw = input.shape()[1] * input.shape()[2];
    let cpg = c / groups;
    let n = T::of((cpg * hw) as f64);
    let x = input.data();
    let dy = dout.data();
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for g in 0..groups {
        let (mean, rstd) = (stats.mean[g], stats.rstd[g]);
        let mut sum_dxh = T::zero();
        let mut sum_dxh_xh = T::zero();
        for cc in 0..cpg {
            let ch = g * cpg + cc;
            let ga = gamma.data()[ch];
            for i in ch * hw..(ch + 1) * hw {
                let xh = (x[i] - mean) * rstd;
                dgamma[ch] += dy[i] * xh;
                dbeta[ch] += dy[i];
                let dxh = dy[i] * ga;
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
            }
        }
        for cc in 0..cpg {
            let ch = g * cpg + cc;
            let ga = gamma.data()[ch];
            for i in ch * hw..(ch + 1) * hw {
                let xh = (x[i] - mean) * rstd;
                let dxh = dy[i] * ga;
                dx[i] = rstd / n * (n * dxh - sum_dxh - xh * sum_dxh_xh);
            }
        }
    }
    (
        Tensor::new(input.shape(), dx).expect("shape"),
        Tensor::new(&[c], dgamma).expect("shape"),
        Tensor::new(&[c], dbeta).expect("shape"),
    )
}
