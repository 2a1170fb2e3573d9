//! Windowed and global pooling. Padded positions never participate: max is
//! taken over in-bounds elements only and the average denominator counts
//! in-bounds elements only.

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

pub struct PoolGeom {
    pub oh: usize,
    pub ow: usize,
}

pub fn geometry(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<PoolGeom, TensorError> {
    if k == 0 {
        return Err(TensorError::InvalidParam("pool kernel must be positive".into()));
    }
    if stride == 0 {
        return Err(TensorError::InvalidParam("pool stride must be positive".into()));
    }
    if 2 * pad > k {
        return Err(TensorError::InvalidParam(format!(
            "pool padding {pad} exceeds half the kernel {k}"
        )));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(TensorError::InvalidParam(format!(
            "pool kernel {k} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    Ok(PoolGeom { oh, ow })
}

/// In-bounds window along one axis for output index `o`.
fn window(o: usize, n: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let start = o * stride;
    let lo = start.saturating_sub(pad);
    let hi = (start + k).saturating_sub(pad).min(n);
    (lo, hi)
}

pub fn forward<T: Scalar>(
    x: &Tensor<T>,
    kind: PoolKind,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, TensorError> {
    let xs = x.shape();
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let g = geometry(h, w, k, stride, pad)?;
    let xd = x.data();

    let mut out = vec![T::zero(); b * c * g.oh * g.ow];
    out.par_chunks_mut(g.oh * g.ow).enumerate().for_each(|(plane, acc)| {
        let xp = &xd[plane * h * w..][..h * w];
        for oy in 0..g.oh {
            let (y0, y1) = window(oy, h, k, stride, pad);
            for ox in 0..g.ow {
                let (x0, x1) = window(ox, w, k, stride, pad);
                let v = match kind {
                    PoolKind::Max => {
                        let mut m = xp[y0 * w + x0];
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                m = m.fmax(xp[iy * w + ix]);
                            }
                        }
                        m
                    }
                    PoolKind::Avg => {
                        let mut s = T::zero();
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                s += xp[iy * w + ix];
                            }
                        }
                        s / T::from_f64(((y1 - y0) * (x1 - x0)) as f64)
                    }
                };
                acc[oy * g.ow + ox] = v;
            }
        }
    });
    Ok(Tensor::new(&[b, c, g.oh, g.ow], out))
}

pub fn backward<T: Scalar>(
    gy: &Tensor<T>,
    x: &Tensor<T>,
    kind: PoolKind,
    k: usize,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let xs = x.shape();
    let (h, w) = (xs[2], xs[3]);
    let g = geometry(h, w, k, stride, pad).expect("pool geometry validated at forward");
    let xd = x.data();
    let gyd = gy.data();

    let mut gx = vec![T::zero(); x.numel()];
    gx.par_chunks_mut(h * w).enumerate().for_each(|(plane, acc)| {
        let xp = &xd[plane * h * w..][..h * w];
        let gp = &gyd[plane * g.oh * g.ow..][..g.oh * g.ow];
        for oy in 0..g.oh {
            let (y0, y1) = window(oy, h, k, stride, pad);
            for ox in 0..g.ow {
                let (x0, x1) = window(ox, w, k, stride, pad);
                let gv = gp[oy * g.ow + ox];
                match kind {
                    PoolKind::Max => {
                        // first maximum in scan order receives the gradient
                        let mut best = (y0, x0);
                        let mut m = xp[y0 * w + x0];
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                if xp[iy * w + ix] > m {
                                    m = xp[iy * w + ix];
                                    best = (iy, ix);
                                }
                            }
                        }
                        acc[best.0 * w + best.1] += gv;
                    }
                    PoolKind::Avg => {
                        let share = gv / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                acc[iy * w + ix] += share;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(xs, gx)
}

pub fn global_forward<T: Scalar>(x: &Tensor<T>, kind: PoolKind) -> Tensor<T> {
    let xs = x.shape();
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let hw = h * w;
    let mut out = vec![T::zero(); b * c];
    for (plane, slot) in out.iter_mut().enumerate() {
        let xp = &x.data()[plane * hw..][..hw];
        *slot = match kind {
            PoolKind::Max => xp.iter().fold(xp[0], |m, &v| m.fmax(v)),
            PoolKind::Avg => {
                let mut s = T::zero();
                for &v in xp {
                    s += v;
                }
                s / T::from_f64(hw as f64)
            }
        };
    }
    Tensor::new(&[b, c, 1, 1], out)
}

pub fn global_backward<T: Scalar>(gy: &Tensor<T>, x: &Tensor<T>, kind: PoolKind) -> Tensor<T> {
    let xs = x.shape();
    let hw = xs[2] * xs[3];
    let mut gx = vec![T::zero(); x.numel()];
    for (plane, chunk) in gx.chunks_mut(hw).enumerate() {
        let gv = gy.data()[plane];
        match kind {
            PoolKind::Max => {
                let xp = &x.data()[plane * hw..][..hw];
                let mut best = 0;
                for (i, &v) in xp.iter().enumerate() {
                    if v > xp[best] {
                        best = i;
                    }
                }
                chunk[best] += gv;
            }
            PoolKind::Avg => {
                let share = gv / T::from_f64(hw as f64);
                chunk.iter_mut().for_each(|v| *v += share);
            }
        }
    }
    Tensor::new(xs, gx)
}
