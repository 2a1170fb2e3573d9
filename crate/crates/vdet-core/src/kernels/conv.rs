//! Direct 2-D cross-correlation with zero padding and channel groups.

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};
use rayon::prelude::*;

/// Geometry of a 2-D convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self, TensorError> {
        if stride == 0 {
            return Err(TensorError::InvalidParam("conv stride must be positive".into()));
        }
        if kernel == 0 {
            return Err(TensorError::InvalidParam("conv kernel must be positive".into()));
        }
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(TensorError::InvalidParam(format!(
                "channels ({in_channels} in, {out_channels} out) must divide groups ({groups})"
            )));
        }
        Ok(ConvSpec { in_channels, out_channels, kernel, stride, padding, groups, bias })
    }

    /// Spatial output size: `floor((n + 2 pad - k) / stride) + 1`.
    pub fn out_dim(&self, n: usize) -> Result<usize, TensorError> {
        let padded = n + 2 * self.padding;
        if padded < self.kernel {
            return Err(TensorError::ShapeMismatch(format!(
                "kernel {} exceeds padded input extent {}",
                self.kernel, padded
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// Weight parameter count, excluding bias.
    pub fn weight_count(&self) -> usize {
        self.out_channels * (self.in_channels / self.groups) * self.kernel * self.kernel
    }
}

/// Valid output index range along one axis for a given kernel tap.
/// Returns `(lo, hi)` such that `lo..hi` keeps `o*stride + tap - pad` inside `0..n`.
fn tap_range(n: usize, out_n: usize, stride: usize, pad: usize, tap: usize) -> (usize, usize) {
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    let hi = if n + pad > tap { ((n + pad - tap - 1) / stride + 1).min(out_n) } else { 0 };
    (lo, hi.max(lo))
}

fn check_shapes<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<(usize, usize, usize, usize, usize), TensorError> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(TensorError::ShapeMismatch(format!("conv input must be 4-D, got {xs:?}")));
    }
    let (b, c, h, w_in) = (xs[0], xs[1], xs[2], xs[3]);
    if c != spec.in_channels {
        return Err(TensorError::ShapeMismatch(format!(
            "conv input has {c} channels, spec expects {}",
            spec.in_channels
        )));
    }
    let expect_w = [
        spec.out_channels,
        spec.in_channels / spec.groups,
        spec.kernel,
        spec.kernel,
    ];
    if w.shape() != expect_w {
        return Err(TensorError::ShapeMismatch(format!(
            "conv weights shaped {:?}, spec expects {:?}",
            w.shape(),
            expect_w
        )));
    }
    if let Some(bt) = bias {
        if bt.shape() != [spec.out_channels] {
            return Err(TensorError::ShapeMismatch(format!(
                "conv bias shaped {:?}, expected [{}]",
                bt.shape(),
                spec.out_channels
            )));
        }
    }
    let oh = spec.out_dim(h)?;
    let ow = spec.out_dim(w_in)?;
    Ok((b, h, w_in, oh, ow))
}

pub fn forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>, TensorError> {
    let (bsz, h, win, oh, ow) = check_shapes(x, w, bias, spec)?;
    let (cin, cout, k, s, p, g) = (
        spec.in_channels,
        spec.out_channels,
        spec.kernel,
        spec.stride,
        spec.padding,
        spec.groups,
    );
    let cpg = cin / g;
    let npg = cout / g;
    let xd = x.data();
    let wd = w.data();

    let mut out = vec![T::zero(); bsz * cout * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, acc)| {
        let b = plane / cout;
        let n = plane % cout;
        if let Some(bt) = bias {
            let bv = bt.data()[n];
            acc.iter_mut().for_each(|v| *v = bv);
        }
        let gi = n / npg;
        for cl in 0..cpg {
            let c = gi * cpg + cl;
            let xp = &xd[(b * cin + c) * h * win..][..h * win];
            for ky in 0..k {
                let (oy_lo, oy_hi) = tap_range(h, oh, s, p, ky);
                for kx in 0..k {
                    let wv = wd[((n * cpg + cl) * k + ky) * k + kx];
                    let (ox_lo, ox_hi) = tap_range(win, ow, s, p, kx);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let xrow = &xp[iy * win..][..win];
                        let arow = &mut acc[oy * ow..][..ow];
                        for ox in ox_lo..ox_hi {
                            arow[ox] += wv * xrow[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::new(&[bsz, cout, oh, ow], out))
}

pub fn backward_input<T: Scalar>(
    gy: &Tensor<T>,
    w: &Tensor<T>,
    x_shape: &[usize],
    spec: &ConvSpec,
) -> Tensor<T> {
    let (bsz, cin, h, win) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (cout, k, s, p, g) = (
        spec.out_channels,
        spec.kernel,
        spec.stride,
        spec.padding,
        spec.groups,
    );
    let cpg = cin / g;
    let npg = cout / g;
    let (oh, ow) = (gy.shape()[2], gy.shape()[3]);
    let gyd = gy.data();
    let wd = w.data();

    let mut gx = vec![T::zero(); bsz * cin * h * win];
    gx.par_chunks_mut(h * win).enumerate().for_each(|(plane, acc)| {
        let b = plane / cin;
        let c = plane % cin;
        let gi = c / cpg;
        let cl = c % cpg;
        for n in gi * npg..(gi + 1) * npg {
            let gp = &gyd[(b * cout + n) * oh * ow..][..oh * ow];
            for ky in 0..k {
                let (oy_lo, oy_hi) = tap_range(h, oh, s, p, ky);
                for kx in 0..k {
                    let wv = wd[((n * cpg + cl) * k + ky) * k + kx];
                    let (ox_lo, ox_hi) = tap_range(win, ow, s, p, kx);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let arow = &mut acc[iy * win..][..win];
                        let grow = &gp[oy * ow..][..ow];
                        for ox in ox_lo..ox_hi {
                            arow[ox * s + kx - p] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    });
    Tensor::new(x_shape, gx)
}

/// Returns `(grad_weights, grad_bias)`; bias gradient only when requested.
pub fn backward_weights<T: Scalar>(
    gy: &Tensor<T>,
    x: &Tensor<T>,
    spec: &ConvSpec,
    want_bias: bool,
) -> (Tensor<T>, Option<Tensor<T>>) {
    let xs = x.shape();
    let (bsz, cin, h, win) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, k, s, p, g) = (
        spec.out_channels,
        spec.kernel,
        spec.stride,
        spec.padding,
        spec.groups,
    );
    let cpg = cin / g;
    let npg = cout / g;
    let (oh, ow) = (gy.shape()[2], gy.shape()[3]);
    let gyd = gy.data();
    let xd = x.data();

    let mut gw = vec![T::zero(); cout * cpg * k * k];
    let mut gb = vec![T::zero(); cout];

    let filter = cpg * k * k;
    gw.par_chunks_mut(filter)
        .zip(gb.par_iter_mut())
        .enumerate()
        .for_each(|(n, (gwn, gbn))| {
            let gi = n / npg;
            for b in 0..bsz {
                let gp = &gyd[(b * cout + n) * oh * ow..][..oh * ow];
                if want_bias {
                    let mut acc = T::zero();
                    for &v in gp {
                        acc += v;
                    }
                    *gbn += acc;
                }
                for cl in 0..cpg {
                    let c = gi * cpg + cl;
                    let xp = &xd[(b * cin + c) * h * win..][..h * win];
                    for ky in 0..k {
                        let (oy_lo, oy_hi) = tap_range(h, oh, s, p, ky);
                        for kx in 0..k {
                            let (ox_lo, ox_hi) = tap_range(win, ow, s, p, kx);
                            let mut acc = T::zero();
                            for oy in oy_lo..oy_hi {
                                let iy = oy * s + ky - p;
                                let xrow = &xp[iy * win..][..win];
                                let grow = &gp[oy * ow..][..ow];
                                for ox in ox_lo..ox_hi {
                                    acc += grow[ox] * xrow[ox * s + kx - p];
                                }
                            }
                            gwn[(cl * k + ky) * k + kx] += acc;
                        }
                    }
                }
            }
        });

    let gw = Tensor::new(&[cout, cpg, k, k], gw);
    let gb = want_bias.then(|| Tensor::new(&[cout], gb));
    (gw, gb)
}
