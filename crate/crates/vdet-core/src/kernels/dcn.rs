//! Modulated deformable convolution: every kernel tap samples the input at
//! a learned fractional displacement and is scaled by a learned factor
//! before the weighted sum.

use super::bilinear;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};
use rayon::prelude::*;

/// Geometry of a deformable convolution. The offset field carries two
/// channels (dx, dy) per kernel tap and the modulation field one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DcnSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl DcnSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        if stride == 0 || kernel == 0 {
            return Err(TensorError::InvalidParam(
                "deform_conv kernel and stride must be positive".into(),
            ));
        }
        Ok(DcnSpec { in_channels, out_channels, kernel, stride, padding })
    }

    /// Taps per kernel window.
    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn out_dim(&self, n: usize) -> Result<usize, TensorError> {
        let padded = n + 2 * self.padding;
        if padded < self.kernel {
            return Err(TensorError::ShapeMismatch(format!(
                "kernel {} exceeds padded input extent {padded}",
                self.kernel
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }
}

struct Geom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    taps: usize,
}

fn check<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    offsets: &Tensor<T>,
    modulation: &Tensor<T>,
    spec: &DcnSpec,
) -> Result<Geom, TensorError> {
    let xs = x.shape();
    if xs.len() != 4 || xs[1] != spec.in_channels {
        return Err(TensorError::ShapeMismatch(format!(
            "deform_conv input shaped {xs:?}, expected [B, {}, H, W]",
            spec.in_channels
        )));
    }
    let k = spec.kernel;
    if w.shape() != [spec.out_channels, spec.in_channels, k, k] {
        return Err(TensorError::ShapeMismatch(format!(
            "deform_conv weights shaped {:?}, expected [{}, {}, {k}, {k}]",
            w.shape(),
            spec.out_channels,
            spec.in_channels
        )));
    }
    if let Some(bt) = bias {
        if bt.shape() != [spec.out_channels] {
            return Err(TensorError::ShapeMismatch(format!(
                "deform_conv bias shaped {:?}",
                bt.shape()
            )));
        }
    }
    let oh = spec.out_dim(xs[2])?;
    let ow = spec.out_dim(xs[3])?;
    let taps = spec.taps();
    if offsets.shape() != [xs[0], 2 * taps, oh, ow] {
        return Err(TensorError::ShapeMismatch(format!(
            "offsets shaped {:?}, expected [{}, {}, {oh}, {ow}]",
            offsets.shape(),
            xs[0],
            2 * taps
        )));
    }
    if modulation.shape() != [xs[0], taps, oh, ow] {
        return Err(TensorError::ShapeMismatch(format!(
            "modulation shaped {:?}, expected [{}, {taps}, {oh}, {ow}]",
            modulation.shape(),
            xs[0]
        )));
    }
    Ok(Geom { b: xs[0], c: xs[1], h: xs[2], w: xs[3], oh, ow, taps })
}

/// Sampling location of tap `(ky, kx)` for output pixel `(oy, ox)`,
/// before the learned displacement.
#[inline]
fn base_coord<T: Scalar>(o: usize, stride: usize, pad: usize, tap: usize) -> T {
    T::from_f64((o * stride + tap) as f64 - pad as f64)
}

/// Modulated bilinear samples for every (pixel, channel, tap) triple,
/// laid out `[B * OH * OW, C * taps]`.
fn modulated_samples<T: Scalar>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    modulation: &Tensor<T>,
    spec: &DcnSpec,
    g: &Geom,
) -> Vec<T> {
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let hw = g.h * g.w;
    let px = g.oh * g.ow;
    let ck = g.c * g.taps;
    let xd = x.data();
    let od = offsets.data();
    let md = modulation.data();

    let mut sm = vec![T::zero(); g.b * px * ck];
    sm.par_chunks_mut(ck).enumerate().for_each(|(idx, row)| {
        let b = idx / px;
        let pidx = idx % px;
        let (oy, ox) = (pidx / g.ow, pidx % g.ow);
        for ky in 0..k {
            for kx in 0..k {
                let tap = ky * k + kx;
                let dx = od[((b * 2 * g.taps + 2 * tap) * g.oh + oy) * g.ow + ox];
                let dy = od[((b * 2 * g.taps + 2 * tap + 1) * g.oh + oy) * g.ow + ox];
                let m = md[((b * g.taps + tap) * g.oh + oy) * g.ow + ox];
                let sx = base_coord::<T>(ox, s, p, kx) + dx;
                let sy = base_coord::<T>(oy, s, p, ky) + dy;
                for c in 0..g.c {
                    let plane = &xd[(b * g.c + c) * hw..][..hw];
                    row[c * g.taps + tap] = bilinear::sample(plane, g.h, g.w, sx, sy) * m;
                }
            }
        }
    });
    sm
}

pub fn forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    offsets: &Tensor<T>,
    modulation: &Tensor<T>,
    spec: &DcnSpec,
) -> Result<Tensor<T>, TensorError> {
    let g = check(x, w, bias, offsets, modulation, spec)?;
    let px = g.oh * g.ow;
    let ck = g.c * g.taps;
    let sm = modulated_samples(x, offsets, modulation, spec, &g);
    let wd = w.data();
    let n_out = spec.out_channels;

    let mut out = vec![T::zero(); g.b * n_out * px];
    out.par_chunks_mut(px).enumerate().for_each(|(plane, acc)| {
        let b = plane / n_out;
        let n = plane % n_out;
        let wn = &wd[n * ck..][..ck];
        let b0 = bias.map(|t| t.data()[n]).unwrap_or_else(T::zero);
        for (pidx, slot) in acc.iter_mut().enumerate() {
            let row = &sm[(b * px + pidx) * ck..][..ck];
            let mut a = b0;
            for (wv, sv) in wn.iter().zip(row) {
                a += *wv * *sv;
            }
            *slot = a;
        }
    });
    Ok(Tensor::new(&[g.b, n_out, g.oh, g.ow], out))
}

pub struct DcnGrads<T> {
    pub x: Tensor<T>,
    pub w: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub offsets: Tensor<T>,
    pub modulation: Tensor<T>,
}

pub fn backward<T: Scalar>(
    gy: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    offsets: &Tensor<T>,
    modulation: &Tensor<T>,
    spec: &DcnSpec,
    want_bias: bool,
) -> DcnGrads<T> {
    let g = check(x, w, None, offsets, modulation, spec).expect("shapes validated at forward");
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let hw = g.h * g.w;
    let px = g.oh * g.ow;
    let ck = g.c * g.taps;
    let n_out = spec.out_channels;
    let xd = x.data();
    let wd = w.data();
    let od = offsets.data();
    let md = modulation.data();
    let gyd = gy.data();

    // Upstream gradient of every modulated sample: v[b,p,ck] = sum_n gy * w.
    let mut v = vec![T::zero(); g.b * px * ck];
    v.par_chunks_mut(ck).enumerate().for_each(|(idx, row)| {
        let b = idx / px;
        let pidx = idx % px;
        for n in 0..n_out {
            let gv = gyd[(b * n_out + n) * px + pidx];
            let wn = &wd[n * ck..][..ck];
            for (slot, wv) in row.iter_mut().zip(wn) {
                *slot += gv * *wv;
            }
        }
    });

    // Weight and bias gradients from the modulated samples.
    let sm = modulated_samples(x, offsets, modulation, spec, &g);
    let mut gw = vec![T::zero(); n_out * ck];
    let mut gb = vec![T::zero(); n_out];
    gw.par_chunks_mut(ck).zip(gb.par_iter_mut()).enumerate().for_each(|(n, (gwn, gbn))| {
        for b in 0..g.b {
            for pidx in 0..px {
                let gv = gyd[(b * n_out + n) * px + pidx];
                *gbn += gv;
                let row = &sm[(b * px + pidx) * ck..][..ck];
                for (slot, sv) in gwn.iter_mut().zip(row) {
                    *slot += gv * *sv;
                }
            }
        }
    });
    drop(sm);

    // Input, offset, and modulation gradients; one batch item per task so
    // the scatter into gx stays single-writer.
    let mut gx = vec![T::zero(); g.b * g.c * hw];
    let mut goff = vec![T::zero(); g.b * 2 * g.taps * px];
    let mut gmod = vec![T::zero(); g.b * g.taps * px];
    gx.par_chunks_mut(g.c * hw)
        .zip(goff.par_chunks_mut(2 * g.taps * px))
        .zip(gmod.par_chunks_mut(g.taps * px))
        .enumerate()
        .for_each(|(b, ((gxb, goffb), gmodb))| {
            for pidx in 0..px {
                let (oy, ox) = (pidx / g.ow, pidx % g.ow);
                let vrow = &v[(b * px + pidx) * ck..][..ck];
                for ky in 0..k {
                    for kx in 0..k {
                        let tap = ky * k + kx;
                        let dx = od[((b * 2 * g.taps + 2 * tap) * g.oh + oy) * g.ow + ox];
                        let dy = od[((b * 2 * g.taps + 2 * tap + 1) * g.oh + oy) * g.ow + ox];
                        let m = md[((b * g.taps + tap) * g.oh + oy) * g.ow + ox];
                        let sx = base_coord::<T>(ox, s, p, kx) + dx;
                        let sy = base_coord::<T>(oy, s, p, ky) + dy;
                        let mut acc_dx = T::zero();
                        let mut acc_dy = T::zero();
                        let mut acc_m = T::zero();
                        for c in 0..g.c {
                            let gms = vrow[c * g.taps + tap];
                            let plane = &xd[(b * g.c + c) * hw..][..hw];
                            let (raw, ddx, ddy) =
                                bilinear::sample_with_grad(plane, g.h, g.w, sx, sy);
                            acc_m += gms * raw;
                            let graw = gms * m;
                            acc_dx += graw * ddx;
                            acc_dy += graw * ddy;
                            bilinear::scatter_grad(
                                &mut gxb[c * hw..][..hw],
                                g.h,
                                g.w,
                                sx,
                                sy,
                                graw,
                            );
                        }
                        goffb[(2 * tap * g.oh + oy) * g.ow + ox] += acc_dx;
                        goffb[((2 * tap + 1) * g.oh + oy) * g.ow + ox] += acc_dy;
                        gmodb[(tap * g.oh + oy) * g.ow + ox] += acc_m;
                    }
                }
            }
        });

    DcnGrads {
        x: Tensor::new(x.shape(), gx),
        w: Tensor::new(w.shape(), gw),
        bias: want_bias.then(|| Tensor::new(&[n_out], gb)),
        offsets: Tensor::new(offsets.shape(), goff),
        modulation: Tensor::new(modulation.shape(), gmod),
    }
}
