//! Batch normalization over the batch and spatial axes of `[B, C, H, W]`.

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Exponential moving averages of per-channel batch statistics.
/// Variance is stored biased so that converged running stats reproduce
/// train-mode outputs exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnState<T> {
    pub fn new(channels: usize) -> Self {
        BnState { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Per-channel statistics the normalization actually used; kept for backward.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub train: bool,
}

pub fn forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BnState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BnSaved<T>), TensorError> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(TensorError::ShapeMismatch(format!("batch_norm input must be 4-D, got {xs:?}")));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if gamma.shape() != [c] || beta.shape() != [c] || state.channels() != c {
        return Err(TensorError::ShapeMismatch(format!(
            "batch_norm expects {c}-channel gamma/beta/state, got {:?}/{:?}/{}",
            gamma.shape(),
            beta.shape(),
            state.channels()
        )));
    }
    let n = b * h * w;
    if matches!(mode, Mode::Train) && n < 2 {
        return Err(TensorError::InvalidParam(format!(
            "batch_norm train mode needs at least 2 elements per channel, got {n}"
        )));
    }

    let (mean, var) = match mode {
        Mode::Train => {
            let (mean, var) = batch_stats(x);
            let m = T::from_f64(BN_MOMENTUM);
            let keep = T::one() - m;
            for ch in 0..c {
                state.mean[ch] = keep * state.mean[ch] + m * mean[ch];
                state.var[ch] = keep * state.var[ch] + m * var[ch];
            }
            (mean, var)
        }
        Mode::Infer => (state.mean.clone(), state.var.clone()),
    };

    let eps = T::from_f64(BN_EPS);
    let hw = h * w;
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..b {
        for ch in 0..c {
            let inv = T::one() / (var[ch] + eps).sqrt();
            let (g, be, mu) = (gamma.data()[ch], beta.data()[ch], mean[ch]);
            let src = &x.data()[(bi * c + ch) * hw..][..hw];
            let dst = &mut out[(bi * c + ch) * hw..][..hw];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = g * (v - mu) * inv + be;
            }
        }
    }
    let saved = BnSaved { mean, var, train: matches!(mode, Mode::Train) };
    Ok((Tensor::new(xs, out), saved))
}

/// Per-channel mean and biased variance over batch and spatial axes.
pub fn batch_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let xs = x.shape();
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let hw = h * w;
    let n = T::from_f64((b * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for bi in 0..b {
            let src = &x.data()[(bi * c + ch) * hw..][..hw];
            for &v in src {
                s += v;
            }
        }
        let mu = s / n;
        let mut sq = T::zero();
        for bi in 0..b {
            let src = &x.data()[(bi * c + ch) * hw..][..hw];
            for &v in src {
                let d = v - mu;
                sq += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = sq / n;
    }
    (mean, var)
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn backward<T: Scalar>(
    gy: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let xs = x.shape();
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let hw = h * w;
    let n = T::from_f64((b * hw) as f64);
    let eps = T::from_f64(BN_EPS);

    let mut gx = vec![T::zero(); x.numel()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];

    for ch in 0..c {
        let mu = saved.mean[ch];
        let inv = T::one() / (saved.var[ch] + eps).sqrt();
        let g = gamma.data()[ch];

        // channel-wide reductions
        let mut sum_gy = T::zero();
        let mut sum_gy_xhat = T::zero();
        for bi in 0..b {
            let xsrc = &x.data()[(bi * c + ch) * hw..][..hw];
            let gsrc = &gy.data()[(bi * c + ch) * hw..][..hw];
            for (&xv, &gv) in xsrc.iter().zip(gsrc) {
                sum_gy += gv;
                sum_gy_xhat += gv * (xv - mu) * inv;
            }
        }
        ggamma[ch] = sum_gy_xhat;
        gbeta[ch] = sum_gy;

        for bi in 0..b {
            let xsrc = &x.data()[(bi * c + ch) * hw..][..hw];
            let gsrc = &gy.data()[(bi * c + ch) * hw..][..hw];
            let dst = &mut gx[(bi * c + ch) * hw..][..hw];
            if saved.train {
                for ((o, &xv), &gv) in dst.iter_mut().zip(xsrc).zip(gsrc) {
                    let xhat = (xv - mu) * inv;
                    *o = g * inv * (gv - sum_gy / n - xhat * sum_gy_xhat / n);
                }
            } else {
                for (o, &gv) in dst.iter_mut().zip(gsrc) {
                    *o = g * inv * gv;
                }
            }
        }
    }
    (
        Tensor::new(xs, gx),
        Tensor::new(&[c], ggamma),
        Tensor::new(&[c], gbeta),
    )
}
