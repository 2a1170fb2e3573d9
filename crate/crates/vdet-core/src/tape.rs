//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Every operation appends a node holding the forward value and enough
//! information to replay its backward rule. Nodes are in topological order
//! by construction, so `backward` is a single reverse sweep. Gradients
//! accumulate by summation across fan-out.

use crate::kernels::bn::BnSaved;
use crate::kernels::{bilinear, bn, conv, dcn, pool};
use crate::kernels::{BnState, ConvSpec, DcnSpec, Mode, PoolKind};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::{Tensor, TensorError};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    Max(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Silu(Var),
    Exp(Var),
    BceWithLogits { z: Var, target: Tensor<T> },
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    Permute { input: Var, perm: Vec<usize> },
    Concat { axis: usize, parts: Vec<Var> },
    Slice { input: Var, axis: usize, start: usize },
    GatherRows { input: Var, rows: Vec<usize> },
    MulChannelGate { x: Var, gate: Var },
    MulSpatialGate { x: Var, gate: Var },
    ChannelMean(Var),
    ChannelMax(Var),
    Upsample2x(Var),
    Conv2d { x: Var, w: Var, bias: Option<Var>, spec: ConvSpec },
    Pool2d { x: Var, kind: PoolKind, k: usize, stride: usize, pad: usize },
    GlobalPool { x: Var, kind: PoolKind },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: BnSaved<T> },
    BilinearSample { feature: Var, coords: Var },
    DeformConv2d { x: Var, w: Var, bias: Option<Var>, offsets: Var, modulation: Var, spec: DcnSpec },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recorded computation graph with values and backward rules.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    requires: Vec<bool>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), requires: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf tensor. Gradients are produced only for leaves created
    /// with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient computed by the most recent `backward` pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires: bool) -> Var {
        self.nodes.push(Node { value, op });
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(
            va.same_shape(vb),
            "elementwise op on mismatched shapes {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data);
        let r = self.req(a) || self.req(b);
        self.push(out, op, r)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn emin(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.fmin(y), Op::Min(a, b))
    }

    pub fn emax(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.fmax(y), Op::Max(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let out = self.nodes[a.0].value.map(|x| x * cv);
        let r = self.req(a);
        self.push(out, Op::Scale(a, cv), r)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let out = self.nodes[a.0].value.map(|x| x + cv);
        let r = self.req(a);
        self.push(out, Op::AddScalar(a), r)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|x| x.fmax(T::zero()));
        let r = self.req(a);
        self.push(out, Op::Relu(a), r)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(sigmoid);
        let r = self.req(a);
        self.push(out, Op::Sigmoid(a), r)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|x| x * sigmoid(x));
        let r = self.req(a);
        self.push(out, Op::Silu(a), r)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|x| x.exp());
        let r = self.req(a);
        self.push(out, Op::Exp(a), r)
    }

    /// Elementwise binary cross-entropy with logits against a fixed target,
    /// computed in the numerically stable form.
    pub fn bce_with_logits(&mut self, z: Var, target: Tensor<T>) -> Var {
        let zv = &self.nodes[z.0].value;
        assert!(
            zv.same_shape(&target),
            "bce target shape {:?} vs logits {:?}",
            target.shape(),
            zv.shape()
        );
        let data = zv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&zi, &yi)| zi.fmax(T::zero()) - zi * yi + (-zi.abs()).exp().ln_1p())
            .collect();
        let out = Tensor::new(zv.shape(), data);
        let r = self.req(z);
        self.push(out, Op::BceWithLogits { z, target }, r)
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut s = T::zero();
        for &v in self.nodes[a.0].value.data() {
            s += v;
        }
        let r = self.req(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), r)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        let mut s = T::zero();
        for &v in self.nodes[a.0].value.data() {
            s += v;
        }
        let r = self.req(a);
        self.push(Tensor::scalar(s / T::from_f64(n as f64)), Op::MeanAll(a), r)
    }

    // ── shape ───────────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.nodes[a.0].value.clone().reshaped(shape);
        let r = self.req(a);
        self.push(out, Op::Reshape(a), r)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let out = permute_data(&self.nodes[a.0].value, perm);
        let r = self.req(a);
        self.push(out, Op::Permute { input: a, perm: perm.to_vec() }, r)
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        let mut axis_total = 0;
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch at dim {d}: {s:?} vs {first:?}");
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let n: usize = out_shape.iter().product();
        let mut data = vec![T::zero(); n];
        let mut off = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            let ca = pv.shape()[axis];
            for o in 0..outer {
                let src = &pv.data()[o * ca * inner..][..ca * inner];
                let dst = &mut data[(o * axis_total + off) * inner..][..ca * inner];
                dst.copy_from_slice(src);
            }
            off += ca;
        }
        let r = parts.iter().any(|&p| self.req(p));
        self.push(Tensor::new(&out_shape, data), Op::Concat { axis, parts: parts.to_vec() }, r)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let shape = av.shape().to_vec();
        assert!(start + len <= shape[axis], "slice {start}+{len} out of {:?}", shape);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src = &av.data()[(o * shape[axis] + start) * inner..][..len * inner];
            data[o * len * inner..][..len * inner].copy_from_slice(src);
        }
        let r = self.req(a);
        self.push(Tensor::new(&out_shape, data), Op::Slice { input: a, axis, start }, r)
    }

    /// Row gather from a 2-D tensor; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.shape().len(), 2, "gather_rows needs a 2-D input");
        let d = av.shape()[1];
        let mut data = Vec::with_capacity(rows.len() * d);
        for &ri in &rows {
            data.extend_from_slice(&av.data()[ri * d..][..d]);
        }
        let out = Tensor::new(&[rows.len(), d], data);
        let r = self.req(a);
        self.push(out, Op::GatherRows { input: a, rows }, r)
    }

    // ── broadcast gates ─────────────────────────────────────────────────

    /// `[B,C,H,W] * [B,C,1,1]`, broadcasting the gate over space.
    pub fn mul_channel_gate(&mut self, x: Var, gate: Var) -> Var {
        let (xs, gs) = (self.nodes[x.0].value.shape().to_vec(), self.nodes[gate.0].value.shape());
        assert!(
            gs == [xs[0], xs[1], 1, 1],
            "channel gate shaped {gs:?} does not match input {xs:?}"
        );
        let hw = xs[2] * xs[3];
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gate.0].value.data();
        let mut data = vec![T::zero(); xd.len()];
        for (plane, chunk) in data.chunks_mut(hw).enumerate() {
            let gv = gd[plane];
            let src = &xd[plane * hw..][..hw];
            for (o, &v) in chunk.iter_mut().zip(src) {
                *o = v * gv;
            }
        }
        let r = self.req(x) || self.req(gate);
        self.push(Tensor::new(&xs, data), Op::MulChannelGate { x, gate }, r)
    }

    /// `[B,C,H,W] * [B,1,H,W]`, broadcasting the gate over channels.
    pub fn mul_spatial_gate(&mut self, x: Var, gate: Var) -> Var {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let gs = self.nodes[gate.0].value.shape();
        assert!(
            gs == [xs[0], 1, xs[2], xs[3]],
            "spatial gate shaped {gs:?} does not match input {xs:?}"
        );
        let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gate.0].value.data();
        let mut data = vec![T::zero(); xd.len()];
        for bi in 0..b {
            let gp = &gd[bi * hw..][..hw];
            for ci in 0..c {
                let src = &xd[(bi * c + ci) * hw..][..hw];
                let dst = &mut data[(bi * c + ci) * hw..][..hw];
                for ((o, &v), &gv) in dst.iter_mut().zip(src).zip(gp) {
                    *o = v * gv;
                }
            }
        }
        let r = self.req(x) || self.req(gate);
        self.push(Tensor::new(&xs, data), Op::MulSpatialGate { x, gate }, r)
    }

    /// Mean over the channel axis: `[B,C,H,W] -> [B,1,H,W]`.
    pub fn channel_mean(&mut self, a: Var) -> Var {
        let xs = self.nodes[a.0].value.shape().to_vec();
        let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xd = self.nodes[a.0].value.data();
        let inv = T::from_f64(1.0 / c as f64);
        let mut data = vec![T::zero(); b * hw];
        for bi in 0..b {
            let dst = &mut data[bi * hw..][..hw];
            for ci in 0..c {
                let src = &xd[(bi * c + ci) * hw..][..hw];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += v;
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let r = self.req(a);
        self.push(Tensor::new(&[b, 1, xs[2], xs[3]], data), Op::ChannelMean(a), r)
    }

    /// Max over the channel axis: `[B,C,H,W] -> [B,1,H,W]`.
    pub fn channel_max(&mut self, a: Var) -> Var {
        let xs = self.nodes[a.0].value.shape().to_vec();
        let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xd = self.nodes[a.0].value.data();
        let mut data = vec![T::zero(); b * hw];
        for bi in 0..b {
            let dst = &mut data[bi * hw..][..hw];
            dst.copy_from_slice(&xd[bi * c * hw..][..hw]);
            for ci in 1..c {
                let src = &xd[(bi * c + ci) * hw..][..hw];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = o.fmax(v);
                }
            }
        }
        let r = self.req(a);
        self.push(Tensor::new(&[b, 1, xs[2], xs[3]], data), Op::ChannelMax(a), r)
    }

    /// Nearest-neighbor 2x spatial upsampling.
    pub fn upsample_nearest2(&mut self, a: Var) -> Var {
        let xs = self.nodes[a.0].value.shape().to_vec();
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xd = self.nodes[a.0].value.data();
        let mut data = vec![T::zero(); b * c * 4 * h * w];
        for plane in 0..b * c {
            let src = &xd[plane * h * w..][..h * w];
            let dst = &mut data[plane * 4 * h * w..][..4 * h * w];
            for y in 0..h {
                for x in 0..w {
                    let v = src[y * w + x];
                    let base = 2 * y * 2 * w + 2 * x;
                    dst[base] = v;
                    dst[base + 1] = v;
                    dst[base + 2 * w] = v;
                    dst[base + 2 * w + 1] = v;
                }
            }
        }
        let r = self.req(a);
        self.push(Tensor::new(&[b, c, 2 * h, 2 * w], data), Op::Upsample2x(a), r)
    }

    // ── network operations ──────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        spec: &ConvSpec,
    ) -> Result<Var, TensorError> {
        let out = conv::forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            bias.map(|b| &self.nodes[b.0].value),
            spec,
        )?;
        let r = self.req(x) || self.req(w) || bias.map(|b| self.req(b)).unwrap_or(false);
        Ok(self.push(out, Op::Conv2d { x, w, bias, spec: spec.clone() }, r))
    }

    pub fn pool2d(
        &mut self,
        x: Var,
        kind: PoolKind,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let out = pool::forward(&self.nodes[x.0].value, kind, k, stride, pad)?;
        let r = self.req(x);
        Ok(self.push(out, Op::Pool2d { x, kind, k, stride, pad }, r))
    }

    pub fn global_pool(&mut self, x: Var, kind: PoolKind) -> Var {
        let out = pool::global_forward(&self.nodes[x.0].value, kind);
        let r = self.req(x);
        self.push(out, Op::GlobalPool { x, kind }, r)
    }

    /// Train mode normalizes by batch statistics and folds them into `state`;
    /// infer mode normalizes by `state`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState<T>,
        mode: Mode,
    ) -> Result<Var, TensorError> {
        let (out, saved) = bn::forward(
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
            state,
            mode,
        )?;
        let r = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, saved }, r))
    }

    /// Bilinear read of a `[C,H,W]` feature map at a `[2]` coordinate tensor
    /// holding `(x, y)`. Out-of-bounds reads contribute zero.
    pub fn bilinear_sample(&mut self, feature: Var, coords: Var) -> Var {
        let f = &self.nodes[feature.0].value;
        let cs = &self.nodes[coords.0].value;
        assert_eq!(f.shape().len(), 3, "bilinear_sample feature must be [C,H,W]");
        assert_eq!(cs.shape(), &[2], "bilinear_sample coords must be [2]");
        let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        let (sx, sy) = (cs.data()[0], cs.data()[1]);
        let mut data = vec![T::zero(); c];
        for (ci, slot) in data.iter_mut().enumerate() {
            *slot = bilinear::sample(&f.data()[ci * h * w..][..h * w], h, w, sx, sy);
        }
        let r = self.req(feature) || self.req(coords);
        self.push(Tensor::new(&[c], data), Op::BilinearSample { feature, coords }, r)
    }

    /// Modulated deformable convolution. `modulation` is consumed as-is;
    /// apply a sigmoid beforehand for the usual (0,1) scaling.
    pub fn deform_conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        offsets: Var,
        modulation: Var,
        spec: &DcnSpec,
    ) -> Result<Var, TensorError> {
        let out = dcn::forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            bias.map(|b| &self.nodes[b.0].value),
            &self.nodes[offsets.0].value,
            &self.nodes[modulation.0].value,
            spec,
        )?;
        let r = self.req(x)
            || self.req(w)
            || self.req(offsets)
            || self.req(modulation)
            || bias.map(|b| self.req(b)).unwrap_or(false);
        Ok(self.push(out, Op::DeformConv2d { x, w, bias, offsets, modulation, spec: spec.clone() }, r))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every `requires_grad` leaf ends up
    /// with a gradient; leaves the loss does not reach get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (lower, upper) = self.grads.split_at_mut(i);
            let g = upper[0].as_ref().expect("grad present");
            let nodes = &self.nodes;
            let requires = &self.requires;
            let mut sink = |v: Var, delta: Tensor<T>| {
                if requires[v.0] {
                    add_grad(&mut lower[v.0], delta);
                }
            };
            match &nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    sink(*a, g.clone());
                    sink(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    sink(*a, g.clone());
                    sink(*b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    sink(*a, zip_map(g, bv, |gv, o| gv * o));
                    sink(*b, zip_map(g, av, |gv, o| gv * o));
                }
                Op::Div(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    sink(*a, zip_map(g, bv, |gv, d| gv / d));
                    let da = Tensor::new(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(av.data().iter().zip(bv.data()))
                            .map(|(&gv, (&n, &d))| -gv * n / (d * d))
                            .collect(),
                    );
                    sink(*b, da);
                }
                Op::Min(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let pick_a = select_mask(av, bv, |x, y| x <= y);
                    sink(*a, masked(g, &pick_a, false));
                    sink(*b, masked(g, &pick_a, true));
                }
                Op::Max(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let pick_a = select_mask(av, bv, |x, y| x >= y);
                    sink(*a, masked(g, &pick_a, false));
                    sink(*b, masked(g, &pick_a, true));
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    sink(*a, g.map(|v| v * c));
                }
                Op::AddScalar(a) => sink(*a, g.clone()),
                Op::Relu(a) => {
                    let av = &nodes[a.0].value;
                    sink(*a, zip_map(g, av, |gv, x| if x > T::zero() { gv } else { T::zero() }));
                }
                Op::Sigmoid(a) => {
                    let out = &nodes[i].value;
                    sink(*a, zip_map(g, out, |gv, s| gv * s * (T::one() - s)));
                }
                Op::Silu(a) => {
                    let av = &nodes[a.0].value;
                    sink(
                        *a,
                        zip_map(g, av, |gv, x| {
                            let s = sigmoid(x);
                            gv * (s + x * s * (T::one() - s))
                        }),
                    );
                }
                Op::Exp(a) => {
                    let out = &nodes[i].value;
                    sink(*a, zip_map(g, out, |gv, e| gv * e));
                }
                Op::BceWithLogits { z, target } => {
                    let zv = &nodes[z.0].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(zv.data().iter().zip(target.data()))
                        .map(|(&gv, (&zi, &yi))| gv * (sigmoid(zi) - yi))
                        .collect();
                    sink(*z, Tensor::new(zv.shape(), data));
                }
                Op::SumAll(a) => {
                    let gv = g.item();
                    sink(*a, Tensor::full(nodes[a.0].value.shape(), gv));
                }
                Op::MeanAll(a) => {
                    let n = nodes[a.0].value.numel();
                    let gv = g.item() / T::from_f64(n as f64);
                    sink(*a, Tensor::full(nodes[a.0].value.shape(), gv));
                }
                Op::Reshape(a) => {
                    sink(*a, g.clone().reshaped(nodes[a.0].value.shape()));
                }
                Op::Permute { input, perm } => {
                    let inv = invert_perm(perm);
                    sink(*input, permute_data(g, &inv));
                }
                Op::Concat { axis, parts } => {
                    let axis = *axis;
                    let out_shape = nodes[i].value.shape().to_vec();
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let total = out_shape[axis];
                    let mut off = 0;
                    for &p in parts {
                        let ps = nodes[p.0].value.shape().to_vec();
                        let ca = ps[axis];
                        if requires[p.0] {
                            let mut data = vec![T::zero(); nodes[p.0].value.numel()];
                            for o in 0..outer {
                                let src = &g.data()[(o * total + off) * inner..][..ca * inner];
                                data[o * ca * inner..][..ca * inner].copy_from_slice(src);
                            }
                            add_grad(&mut lower[p.0], Tensor::new(&ps, data));
                        }
                        off += ca;
                    }
                }
                Op::Slice { input, axis, start } => {
                    let xs = nodes[input.0].value.shape().to_vec();
                    let outer: usize = xs[..*axis].iter().product();
                    let inner: usize = xs[*axis + 1..].iter().product();
                    let len = nodes[i].value.shape()[*axis];
                    let mut data = vec![T::zero(); nodes[input.0].value.numel()];
                    for o in 0..outer {
                        let dst = &mut data[(o * xs[*axis] + start) * inner..][..len * inner];
                        dst.copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
                    }
                    sink(*input, Tensor::new(&xs, data));
                }
                Op::GatherRows { input, rows } => {
                    let xs = nodes[input.0].value.shape().to_vec();
                    let d = xs[1];
                    let mut data = vec![T::zero(); nodes[input.0].value.numel()];
                    for (r, &ri) in rows.iter().enumerate() {
                        let src = &g.data()[r * d..][..d];
                        let dst = &mut data[ri * d..][..d];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                    sink(*input, Tensor::new(&xs, data));
                }
                Op::MulChannelGate { x, gate } => {
                    let xs = nodes[x.0].value.shape().to_vec();
                    let hw = xs[2] * xs[3];
                    let gd = nodes[gate.0].value.data();
                    let xd = nodes[x.0].value.data();
                    if requires[x.0] {
                        let mut data = vec![T::zero(); xd.len()];
                        for (plane, chunk) in data.chunks_mut(hw).enumerate() {
                            let gv = gd[plane];
                            let src = &g.data()[plane * hw..][..hw];
                            for (o, &vg) in chunk.iter_mut().zip(src) {
                                *o = vg * gv;
                            }
                        }
                        add_grad(&mut lower[x.0], Tensor::new(&xs, data));
                    }
                    if requires[gate.0] {
                        let mut data = vec![T::zero(); gd.len()];
                        for (plane, slot) in data.iter_mut().enumerate() {
                            let gsrc = &g.data()[plane * hw..][..hw];
                            let xsrc = &xd[plane * hw..][..hw];
                            let mut acc = T::zero();
                            for (&a, &b) in gsrc.iter().zip(xsrc) {
                                acc += a * b;
                            }
                            *slot = acc;
                        }
                        add_grad(
                            &mut lower[gate.0],
                            Tensor::new(&[xs[0], xs[1], 1, 1], data),
                        );
                    }
                }
                Op::MulSpatialGate { x, gate } => {
                    let xs = nodes[x.0].value.shape().to_vec();
                    let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let gd = nodes[gate.0].value.data();
                    let xd = nodes[x.0].value.data();
                    if requires[x.0] {
                        let mut data = vec![T::zero(); xd.len()];
                        for bi in 0..b {
                            let gp = &gd[bi * hw..][..hw];
                            for ci in 0..c {
                                let src = &g.data()[(bi * c + ci) * hw..][..hw];
                                let dst = &mut data[(bi * c + ci) * hw..][..hw];
                                for ((o, &vg), &gv) in dst.iter_mut().zip(src).zip(gp) {
                                    *o = vg * gv;
                                }
                            }
                        }
                        add_grad(&mut lower[x.0], Tensor::new(&xs, data));
                    }
                    if requires[gate.0] {
                        let mut data = vec![T::zero(); gd.len()];
                        for bi in 0..b {
                            let dst = &mut data[bi * hw..][..hw];
                            for ci in 0..c {
                                let gsrc = &g.data()[(bi * c + ci) * hw..][..hw];
                                let xsrc = &xd[(bi * c + ci) * hw..][..hw];
                                for ((o, &a), &x_) in dst.iter_mut().zip(gsrc).zip(xsrc) {
                                    *o += a * x_;
                                }
                            }
                        }
                        add_grad(
                            &mut lower[gate.0],
                            Tensor::new(&[b, 1, xs[2], xs[3]], data),
                        );
                    }
                }
                Op::ChannelMean(a) => {
                    let xs = nodes[a.0].value.shape().to_vec();
                    let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let inv = T::from_f64(1.0 / c as f64);
                    let mut data = vec![T::zero(); nodes[a.0].value.numel()];
                    for bi in 0..b {
                        let gp = &g.data()[bi * hw..][..hw];
                        for ci in 0..c {
                            let dst = &mut data[(bi * c + ci) * hw..][..hw];
                            for (o, &gv) in dst.iter_mut().zip(gp) {
                                *o = gv * inv;
                            }
                        }
                    }
                    sink(*a, Tensor::new(&xs, data));
                }
                Op::ChannelMax(a) => {
                    let xs = nodes[a.0].value.shape().to_vec();
                    let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let xd = nodes[a.0].value.data();
                    let mut data = vec![T::zero(); nodes[a.0].value.numel()];
                    for bi in 0..b {
                        let gp = &g.data()[bi * hw..][..hw];
                        for pix in 0..hw {
                            // first channel holding the max receives the gradient
                            let mut best = 0;
                            let mut m = xd[bi * c * hw + pix];
                            for ci in 1..c {
                                let v = xd[(bi * c + ci) * hw + pix];
                                if v > m {
                                    m = v;
                                    best = ci;
                                }
                            }
                            data[(bi * c + best) * hw + pix] += gp[pix];
                        }
                    }
                    sink(*a, Tensor::new(&xs, data));
                }
                Op::Upsample2x(a) => {
                    let xs = nodes[a.0].value.shape().to_vec();
                    let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                    let mut data = vec![T::zero(); nodes[a.0].value.numel()];
                    for plane in 0..bc {
                        let gp = &g.data()[plane * 4 * h * w..][..4 * h * w];
                        let dst = &mut data[plane * h * w..][..h * w];
                        for y in 0..h {
                            for x in 0..w {
                                let base = 2 * y * 2 * w + 2 * x;
                                dst[y * w + x] = gp[base]
                                    + gp[base + 1]
                                    + gp[base + 2 * w]
                                    + gp[base + 2 * w + 1];
                            }
                        }
                    }
                    sink(*a, Tensor::new(&xs, data));
                }
                Op::Conv2d { x, w, bias, spec } => {
                    if requires[x.0] {
                        let gx = conv::backward_input(g, &nodes[w.0].value, nodes[x.0].value.shape(), spec);
                        add_grad(&mut lower[x.0], gx);
                    }
                    let want_bias = bias.map(|b| requires[b.0]).unwrap_or(false);
                    if requires[w.0] || want_bias {
                        let (gw, gb) = conv::backward_weights(g, &nodes[x.0].value, spec, want_bias);
                        if requires[w.0] {
                            add_grad(&mut lower[w.0], gw);
                        }
                        if let (Some(bvar), Some(gb)) = (bias, gb) {
                            add_grad(&mut lower[bvar.0], gb);
                        }
                    }
                }
                Op::Pool2d { x, kind, k, stride, pad } => {
                    let gx = pool::backward(g, &nodes[x.0].value, *kind, *k, *stride, *pad);
                    sink(*x, gx);
                }
                Op::GlobalPool { x, kind } => {
                    let gx = pool::global_backward(g, &nodes[x.0].value, *kind);
                    sink(*x, gx);
                }
                Op::BatchNorm { x, gamma, beta, saved } => {
                    let (gx, ggamma, gbeta) =
                        bn::backward(g, &nodes[x.0].value, &nodes[gamma.0].value, saved);
                    sink(*x, gx);
                    sink(*gamma, ggamma);
                    sink(*beta, gbeta);
                }
                Op::BilinearSample { feature, coords } => {
                    let f = &nodes[feature.0].value;
                    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
                    let cs = &nodes[coords.0].value;
                    let (sx, sy) = (cs.data()[0], cs.data()[1]);
                    if requires[feature.0] {
                        let mut data = vec![T::zero(); f.numel()];
                        for ci in 0..c {
                            bilinear::scatter_grad(
                                &mut data[ci * h * w..][..h * w],
                                h,
                                w,
                                sx,
                                sy,
                                g.data()[ci],
                            );
                        }
                        add_grad(&mut lower[feature.0], Tensor::new(f.shape(), data));
                    }
                    if requires[coords.0] {
                        let mut acc_x = T::zero();
                        let mut acc_y = T::zero();
                        for ci in 0..c {
                            let (_, dx, dy) = bilinear::sample_with_grad(
                                &f.data()[ci * h * w..][..h * w],
                                h,
                                w,
                                sx,
                                sy,
                            );
                            acc_x += g.data()[ci] * dx;
                            acc_y += g.data()[ci] * dy;
                        }
                        add_grad(&mut lower[coords.0], Tensor::new(&[2], vec![acc_x, acc_y]));
                    }
                }
                Op::DeformConv2d { x, w, bias, offsets, modulation, spec } => {
                    let want_bias = bias.map(|b| requires[b.0]).unwrap_or(false);
                    let grads = dcn::backward(
                        g,
                        &nodes[x.0].value,
                        &nodes[w.0].value,
                        &nodes[offsets.0].value,
                        &nodes[modulation.0].value,
                        spec,
                        want_bias,
                    );
                    sink(*x, grads.x);
                    sink(*w, grads.w);
                    sink(*offsets, grads.offsets);
                    sink(*modulation, grads.modulation);
                    if let (Some(bvar), Some(gb)) = (bias, grads.bias) {
                        add_grad(&mut lower[bvar.0], gb);
                    }
                }
            }
        }

        // untouched grad-requiring leaves read as zero
        for i in 0..self.nodes.len() {
            if self.requires[i] && matches!(self.nodes[i].op, Op::Leaf) && self.grads[i].is_none() {
                self.grads[i] = Some(Tensor::zeros(self.nodes[i].value.shape()));
            }
        }
        Ok(())
    }
}

fn add_grad<T: Scalar>(slot: &mut Option<Tensor<T>>, delta: Tensor<T>) {
    match slot {
        Some(t) => {
            debug_assert!(t.same_shape(&delta));
            for (o, &v) in t.data_mut().iter_mut().zip(delta.data()) {
                *o += v;
            }
        }
        None => *slot = Some(delta),
    }
}

fn zip_map<T: Scalar>(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        g.shape(),
        g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect(),
    )
}

fn select_mask<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, pick_a: impl Fn(T, T) -> bool) -> Vec<bool> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| pick_a(x, y)).collect()
}

fn masked<T: Scalar>(g: &Tensor<T>, mask: &[bool], invert: bool) -> Tensor<T> {
    Tensor::new(
        g.shape(),
        g.data()
            .iter()
            .zip(mask)
            .map(|(&gv, &m)| if m != invert { gv } else { T::zero() })
            .collect(),
    )
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_data<T: Scalar>(src: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_shape = src.shape();
    assert_eq!(perm.len(), in_shape.len(), "permutation rank mismatch");
    let nd = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let n = src.numel();
    let mut data = vec![T::zero(); n];
    let sd = src.data();
    let mut coords = vec![0usize; nd];
    for (flat, slot) in data.iter_mut().enumerate() {
        let mut rem = flat;
        for d in (0..nd).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut src_idx = 0;
        for d in 0..nd {
            src_idx += coords[d] * in_strides[perm[d]];
        }
        *slot = sd[src_idx];
    }
    Tensor::new(&out_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_of_squares_is_2x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[4], vec![1.0, -2.0, 3.0, 0.5]), true);
        let sq = tape.mul(x, x);
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g.data(), &[2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn fanout_accumulates_by_sum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let a = tape.scale(x, 2.0);
        let b = tape.scale(x, 5.0);
        let s = tape.add(a, b);
        let loss = tape.sum_all(s);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 7.0);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        let unused = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]), true);
        let loss = tape.mul(x, x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]), true);
        let y = tape.mul(x, x);
        assert!(matches!(tape.backward(y), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_replay_is_bitwise_identical() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::rand_uniform(&[1, 3, 6, 6], -1.0, 1.0, &mut rng), true);
        let w = tape.leaf(Tensor::rand_uniform(&[4, 3, 3, 3], -0.5, 0.5, &mut rng), true);
        let spec = ConvSpec::new(3, 4, 3, 1, 1, 1, false).unwrap();
        let y = tape.conv2d(x, w, None, &spec).unwrap();
        let act = tape.silu(y);
        let loss = tape.mean_all(act);
        tape.backward(loss).unwrap();
        let g1 = tape.grad(w).unwrap().clone();
        tape.backward(loss).unwrap();
        let g2 = tape.grad(w).unwrap().clone();
        assert_eq!(g1, g2);
    }

    #[test]
    fn sigmoid_outputs_in_open_unit_interval() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::new(&[7], vec![-700.0, -30.0, -1.0, 0.0, 1.0, 30.0, 700.0]),
            false,
        );
        let s = tape.sigmoid(x);
        for &v in tape.value(s).data() {
            assert!(v > 0.0 && v < 1.0, "sigmoid value {v} outside (0,1)");
        }
        assert_eq!(tape.value(s).data()[3], 0.5);
    }

    #[test]
    fn permute_roundtrip() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::<f64>::rand_uniform(&[2, 3, 4, 5], -1.0, 1.0, &mut rng);
        let p = permute_data(&t, &[2, 0, 3, 1]);
        assert_eq!(p.shape(), &[4, 2, 5, 3]);
        let back = permute_data(&p, &invert_perm(&[2, 0, 3, 1]));
        assert_eq!(back, t);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(&[1, 2, 2, 2], (0..8).map(|i| i as f64).collect()), false);
        let b = tape.leaf(Tensor::new(&[1, 1, 2, 2], (8..12).map(|i| i as f64).collect()), false);
        let c = tape.concat(1, &[a, b]);
        assert_eq!(tape.value(c).shape(), &[1, 3, 2, 2]);
        let s = tape.slice(c, 1, 2, 1);
        assert_eq!(tape.value(s).data(), tape.value(b).data());
    }
}
