//! Network building blocks: CBS, ghost convolution, cross-stage fusion
//! blocks, pooling pyramid, channel/spatial attention, and the deformable
//! head convolution.

use super::{Builder, BnId, FwdCtx, Init, ParamId};
use crate::kernels::{ConvSpec, DcnSpec, PoolKind};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::TensorError;

/// Raw convolution parameters.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Scalar>(
        b: &mut Builder<T>,
        path: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let spec = ConvSpec::new(cin, cout, k, stride, pad, groups, bias)
            .unwrap_or_else(|e| panic!("{path}: {e}"));
        let weight = b.param(format!("{path}.weight"), &[cout, cin / groups, k, k], init);
        let bias = bias.then(|| b.param(format!("{path}.bias"), &[cout], Init::Zero));
        Conv { weight, bias, spec }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &FwdCtx<T>,
    ) -> Result<Var, TensorError> {
        tape.conv2d(x, ctx.var(self.weight), self.bias.map(|b| ctx.var(b)), &self.spec)
    }
}

/// Batch normalization parameters plus the running-state slot.
#[derive(Clone, Debug)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BnId,
    pub channels: usize,
}

impl BnLayer {
    pub fn build<T: Scalar>(b: &mut Builder<T>, path: &str, channels: usize) -> Self {
        let gamma = b.param(format!("{path}.gamma"), &[channels], Init::One);
        let beta = b.param(format!("{path}.beta"), &[channels], Init::Zero);
        let state = b.store.add_bn_state(format!("{path}.running"), channels);
        BnLayer { gamma, beta, state, channels }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &mut FwdCtx<T>,
    ) -> Result<Var, TensorError> {
        let gamma = ctx.var(self.gamma);
        let beta = ctx.var(self.beta);
        let mode = ctx.mode;
        let state = &mut ctx.bn_states[self.state.0].1;
        tape.batch_norm(x, gamma, beta, state, mode)
    }
}

/// Convolution, batch normalization, SiLU.
#[derive(Clone, Debug)]
pub struct Cbs {
    pub conv: Conv,
    pub bn: BnLayer,
}

impl Cbs {
    pub fn build<T: Scalar>(
        b: &mut Builder<T>,
        path: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let pad = k / 2;
        let fan_in = cin * k * k;
        let conv = Conv::build(
            b,
            &format!("{path}.conv"),
            cin,
            cout,
            k,
            stride,
            pad,
            1,
            false,
            Init::ScaledUniform { fan_in },
        );
        let bn = BnLayer::build(b, &format!("{path}.bn"), cout);
        Cbs { conv, bn }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &mut FwdCtx<T>,
    ) -> Result<Var, TensorError> {
        let y = self.conv.forward(tape, x, ctx)?;
        let y = self.bn.forward(tape, y, ctx)?;
        Ok(tape.silu(y))
    }

    pub fn out_channels(&self) -> usize {
        self.conv.spec.out_channels
    }
}

/// Ghost module geometry: `n` output channels produced from
/// `m = ceil(n/ratio)` intrinsic maps plus cheap depthwise expansions.
#[derive(Clone, Copy, Debug)]
pub struct GhostSpec {
    pub out_channels: usize,
    pub ratio: usize,
    pub primary_kernel: usize,
    pub cheap_kernel: usize,
}

impl GhostSpec {
    pub fn new(out_channels: usize, ratio: usize, primary_kernel: usize, cheap_kernel: usize) -> Result<Self, TensorError> {
        if ratio < 2 {
            return Err(TensorError::InvalidParam("ghost ratio must be at least 2".into()));
        }
        if out_channels < ratio {
            return Err(TensorError::InvalidParam(format!(
                "ghost output channels {out_channels} below ratio {ratio}"
            )));
        }
        Ok(GhostSpec { out_channels, ratio, primary_kernel, cheap_kernel })
    }

    /// Intrinsic map count.
    pub fn intrinsic(&self) -> usize {
        self.out_channels.div_ceil(self.ratio)
    }

    /// Conv weight count of the module (primary plus cheap, no bias/bn).
    pub fn weight_count(&self, in_channels: usize) -> usize {
        let m = self.intrinsic();
        in_channels * m * self.primary_kernel * self.primary_kernel
            + m * (self.ratio - 1) * self.cheap_kernel * self.cheap_kernel
    }
}

/// Ghost convolution: primary conv emits the intrinsic maps, a grouped
/// depthwise conv emits the cheap maps, the concatenation is truncated to
/// the requested width and passed through bn + SiLU.
#[derive(Clone, Debug)]
pub struct GhostConv {
    pub spec: GhostSpec,
    pub primary: Conv,
    pub cheap: Conv,
    pub bn: BnLayer,
}

impl GhostConv {
    pub fn build<T: Scalar>(
        b: &mut Builder<T>,
        path: &str,
        cin: usize,
        spec: GhostSpec,
        stride: usize,
    ) -> Self {
        let m = spec.intrinsic();
        let (k, d) = (spec.primary_kernel, spec.cheap_kernel);
        let primary = Conv::build(
            b,
            &format!("{path}.primary"),
            cin,
            m,
            k,
            stride,
            k / 2,
            1,
            false,
            Init::ScaledUniform { fan_in: cin * k * k },
        );
        let cheap = Conv::build(
            b,
            &format!("{path}.cheap"),
            m,
            m * (spec.ratio - 1),
            d,
            1,
            d / 2,
            m,
            false,
            Init::ScaledUniform { fan_in: d * d },
        );
        let bn = BnLayer::build(b, &format!("{path}.bn"), spec.out_channels);
        GhostConv { spec, primary, cheap, bn }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &mut FwdCtx<T>,
    ) -> Result<Var, TensorError> {
        let intrinsic = self.primary.forward(tape, x, ctx)?;
        let cheap = self.cheap.forward(tape, intrinsic, ctx)?;
        let cat = tape.concat(1, &[intrinsic, cheap]);
        let n = self.spec.out_channels;
        let trimmed = if tape.value(cat).shape()[1] == n { cat } else { tape.slice(cat, 1, 0, n) };
        let y = self.bn.forward(tape, trimmed, ctx)?;
        Ok(tape.silu(y))
    }

    pub fn out_channels(&self) -> usize {
        self.spec.out_channels
    }
}

/// Single convolution unit of a cross-stage block: standard or ghost.
#[derive(Clone, Debug)]
pub enum C3Unit {
    Std(Cbs),
    Ghost(GhostConv),
}

impl C3Unit {
    fn build<T: Scalar>(
        b: &mut Builder<T>,
        path: &str,
        cin: usize,
        cout: usize,
        k: usize,
        ghost: bool,
    ) -> Self {
        if ghost {
            let spec = GhostSpec::new(cout, 2, k, 3).expect("valid ghost widths");
            C3Unit::Ghost(GhostConv::build(b, path, cin, spec, 1))
        } else {
            C3Unit::Std(Cbs::build(b, path, cin, cout, k, 1))
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &mut FwdCtx<T>,
    ) -> Result<Var, TensorError> {
        match self {
            C3Unit::Std(c) => c.forward(tape, x, ctx),
            C3Unit::Ghost(g) => g.forward(tape, x, ctx),
        }
    }
}

/// Residual bottleneck of two conv units.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub cv1: C3Unit,
    pub cv2: C3Unit,
    pub residual: bool,
}

impl Bottleneck {
    fn build<T: Scalar>(
        b: &mut Builder<T>,
        path: &str,
        channels: usize,
        kernels: (usize, usize),
        ghost: bool,
        residual: bool,
    ) -> Self {
        Bottleneck {
            cv1: C3Unit::build(b, &format!("{path}.cv1"), channels, channels, kernels.0, ghost),
            cv2: C3Unit::build(b, &format!("{path}.cv2"), channels, channels, kernels.1, ghost),
            residual,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &mut FwdCtx<T>,
    ) -> Result<Var, TensorError> {
        let y = self.cv1.forward(tape, x, ctx)?;
        let y = self.cv2.forward(tape, y, ctx)?;
        Ok(if self.residual { tape.add(x, y) } else { y })
    }
}

/// Split/fuse block: a 1x1 CBS splits into two halves, a bottleneck chain
/// extends the second half, and everything is concatenated and fused.
#[derive(Clone, Debug)]
pub struct C2f {
    pub cv1: Cbs,
    pub cv2: Cbs,
    pub bottlenecks: Vec<Bottleneck>,
    pub hidden: usize,
}

impl C2f {
    pub fn build<T: Scalar>(
        b: &mut Builder<T>,
        path: &str,
        cin: usize,
        cout: usize,
        n: usize,
    ) -> Self {
        let hidden = cout / 2;
        let cv1 = Cbs::build(b, &format!("{path}.cv1"), cin, 2 * hidden, 1, 1);
        let bottlenecks = (0..n)
            .map(|i| {
                Bottleneck::build(b, &format!("{path}.m{i}"), hidden, (3, 3), false, true)
            })
            .collect();
        let cv2 = Cbs::build(b, &format!("{path}.cv2"), (2 + n) * hidden, cout, 1, 1);
        C2f { cv1, cv2, bottlenecks, hidden }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &mut FwdCtx<T>,
    ) -> Result<Var, TensorError> {
        let y = self.cv1.forward(tape, x, ctx)?;
        let a = tape.slice(y, 1, 0, self.hidden);
        let b = tape.slice(y, 1, self.hidden, self.hidden);
        let mut parts = vec![a, b];
        let mut cur = b;
        for bt in &self.bottlenecks {
            cur = bt.forward(tape, cur, ctx)?;
            parts.push(cur);
        }
        let cat = tape.concat(1, &parts);
        self.cv2.forward(tape, cat, ctx)
    }

    pub fn out_channels(&self) -> usize {
        self.cv2.out_channels()
    }
}

/// Classic three-conv cross-stage block; `ghost` swaps every internal conv
/// for a ghost convolution.
#[derive(Clone, Debug)]
pub struct C3Block {
    pub cv1: C3Unit,
    pub cv2: C3Unit,
    pub cv3: C3Unit,
    pub bottlenecks: Vec<Bottleneck>,
    pub hidden: usize,
}

impl C3Block {
    pub fn build<T: Scalar>(
        b: &mut Builder<T>,
        path: &str,
        cin: usize,
        cout: usize,
        n: usize,
        ghost: bool,
    ) -> Self {
        let hidden = cout / 2;
        let cv1 = C3Unit::build(b, &format!("{path}.cv1"), cin, hidden, 1, ghost);
        let cv2 = C3Unit::build(b, &format!("{path}.cv2"), cin, hidden, 1, ghost);
        let bottlenecks = (0..n)
            .map(|i| Bottleneck::build(b, &format!("{path}.m{i}"), hidden, (1, 3), ghost, true))
            .collect();
        let cv3 = C3Unit::build(b, &format!("{path}.cv3"), 2 * hidden, cout, 1, ghost);
        C3Block { cv1, cv2, cv3, bottlenecks, hidden }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &mut FwdCtx<T>,
    ) -> Result<Var, TensorError> {
        let mut main = self.cv1.forward(tape, x, ctx)?;
        for bt in &self.bottlenecks {
            main = bt.forward(tape, main, ctx)?;
        }
        let side = self.cv2.forward(tape, x, ctx)?;
        let cat = tape.concat(1, &[main, side]);
        self.cv3.forward(tape, cat, ctx)
    }
}

/// Cascaded max-pool pyramid over a hidden width, concatenated and fused.
#[derive(Clone, Debug)]
pub struct Sppf {
    pub cv1: Cbs,
    pub cv2: Cbs,
    pub hidden: usize,
}

impl Sppf {
    pub fn build<T: Scalar>(
        b: &mut Builder<T>,
        path: &str,
        cin: usize,
        cout: usize,
        hidden: usize,
    ) -> Self {
        let cv1 = Cbs::build(b, &format!("{path}.cv1"), cin, hidden, 1, 1);
        let cv2 = Cbs::build(b, &format!("{path}.cv2"), 4 * hidden, cout, 1, 1);
        Sppf { cv1, cv2, hidden }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &mut FwdCtx<T>,
    ) -> Result<Var, TensorError> {
        let y = self.cv1.forward(tape, x, ctx)?;
        let p1 = tape.pool2d(y, PoolKind::Max, 5, 1, 2)?;
        let p2 = tape.pool2d(p1, PoolKind::Max, 5, 1, 2)?;
        let p3 = tape.pool2d(p2, PoolKind::Max, 5, 1, 2)?;
        let cat = tape.concat(1, &[y, p1, p2, p3]);
        self.cv2.forward(tape, cat, ctx)
    }
}

/// Channel + spatial attention geometry.
#[derive(Clone, Copy, Debug)]
pub struct CbamSpec {
    pub channels: usize,
    pub reduction: usize,
    pub spatial_kernel: usize,
}

impl CbamSpec {
    pub fn new(channels: usize, reduction: usize, spatial_kernel: usize) -> Self {
        assert!(spatial_kernel % 2 == 1, "spatial attention kernel must be odd");
        CbamSpec { channels, reduction, spatial_kernel }
    }

    pub fn hidden(&self) -> usize {
        (self.channels / self.reduction).max(4)
    }
}

/// Sequential channel-then-spatial gating.
#[derive(Clone, Debug)]
pub struct Cbam {
    pub spec: CbamSpec,
    pub fc1: Conv,
    pub fc2: Conv,
    pub spatial: Conv,
}

impl Cbam {
    pub fn build<T: Scalar>(b: &mut Builder<T>, path: &str, spec: CbamSpec) -> Self {
        let (c, h) = (spec.channels, spec.hidden());
        let fc1 = Conv::build(
            b,
            &format!("{path}.fc1"),
            c,
            h,
            1,
            1,
            0,
            1,
            true,
            Init::ScaledUniform { fan_in: c },
        );
        let fc2 = Conv::build(
            b,
            &format!("{path}.fc2"),
            h,
            c,
            1,
            1,
            0,
            1,
            true,
            Init::ScaledUniform { fan_in: h },
        );
        let sk = spec.spatial_kernel;
        let spatial = Conv::build(
            b,
            &format!("{path}.spatial"),
            2,
            1,
            sk,
            1,
            sk / 2,
            1,
            true,
            Init::ScaledUniform { fan_in: 2 * sk * sk },
        );
        Cbam { spec, fc1, fc2, spatial }
    }

    /// Per-channel gate in (0,1): shared two-layer MLP over the average- and
    /// max-pooled descriptors, summed, then a sigmoid.
    pub fn channel_attention<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &FwdCtx<T>,
    ) -> Result<Var, TensorError> {
        let avg = tape.global_pool(x, PoolKind::Avg);
        let mx = tape.global_pool(x, PoolKind::Max);
        let mut branches = Vec::with_capacity(2);
        for pooled in [avg, mx] {
            let h = self.fc1.forward(tape, pooled, ctx)?;
            let h = tape.relu(h);
            branches.push(self.fc2.forward(tape, h, ctx)?);
        }
        let sum = tape.add(branches[0], branches[1]);
        Ok(tape.sigmoid(sum))
    }

    /// Per-location gate in (0,1): channel mean/max maps through a wide conv.
    pub fn spatial_attention<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &FwdCtx<T>,
    ) -> Result<Var, TensorError> {
        let mean = tape.channel_mean(x);
        let max = tape.channel_max(x);
        let cat = tape.concat(1, &[mean, max]);
        let conv = self.spatial.forward(tape, cat, ctx)?;
        Ok(tape.sigmoid(conv))
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &mut FwdCtx<T>,
    ) -> Result<Var, TensorError> {
        let mc = self.channel_attention(tape, x, ctx)?;
        let refined = tape.mul_channel_gate(x, mc);
        let ms = self.spatial_attention(tape, refined, ctx)?;
        Ok(tape.mul_spatial_gate(refined, ms))
    }
}

/// Deformable convolution block: sibling convs over the input predict the
/// tap displacements and (pre-sigmoid) modulation; the main deformable
/// conv output passes bn + SiLU. Offset and modulation branches start at
/// zero so training begins as a half-scaled standard convolution.
#[derive(Clone, Debug)]
pub struct DeformCbs {
    pub spec: DcnSpec,
    pub offset: Conv,
    pub modulation: Conv,
    pub weight: ParamId,
    pub bn: BnLayer,
}

impl DeformCbs {
    pub fn build<T: Scalar>(
        b: &mut Builder<T>,
        path: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let spec = DcnSpec::new(cin, cout, k, stride, k / 2).expect("valid deform spec");
        let taps = spec.taps();
        let offset = Conv::build(
            b,
            &format!("{path}.offset"),
            cin,
            2 * taps,
            3,
            stride,
            1,
            1,
            true,
            Init::Zero,
        );
        let modulation = Conv::build(
            b,
            &format!("{path}.modulation"),
            cin,
            taps,
            3,
            stride,
            1,
            1,
            true,
            Init::Zero,
        );
        let weight = b.param(
            format!("{path}.weight"),
            &[cout, cin, k, k],
            Init::ScaledUniform { fan_in: cin * k * k },
        );
        let bn = BnLayer::build(b, &format!("{path}.bn"), cout);
        DeformCbs { spec, offset, modulation, weight, bn }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &mut FwdCtx<T>,
    ) -> Result<Var, TensorError> {
        let offsets = self.offset.forward(tape, x, ctx)?;
        let raw_mod = self.modulation.forward(tape, x, ctx)?;
        let modulation = tape.sigmoid(raw_mod);
        let y = tape.deform_conv2d(x, ctx.var(self.weight), None, offsets, modulation, &self.spec)?;
        let y = self.bn.forward(tape, y, ctx)?;
        Ok(tape.silu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Mode;
    use crate::nn::{stage_params, ParamStore};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run_block<T: Scalar>(
        store: &mut ParamStore<T>,
        x: Tensor<T>,
        mode: Mode,
        f: impl FnOnce(&mut Tape<T>, Var, &mut FwdCtx<T>) -> Result<Var, TensorError>,
    ) -> Tensor<T> {
        let mut tape = Tape::new();
        let vars = stage_params(&mut tape, store, false);
        let xv = tape.constant(x);
        let mut ctx = FwdCtx { vars: &vars, bn_states: store.bn_states_mut(), mode };
        let y = f(&mut tape, xv, &mut ctx).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn ghost_emits_requested_channel_count() {
        for (n, s) in [(64usize, 2usize), (96, 3), (17, 2)] {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut b = Builder::new(&mut store, &mut rng);
            let spec = GhostSpec::new(n, s, 1, 3).unwrap();
            let ghost = GhostConv::build(&mut b, "g", 8, spec, 1);
            let mut r2 = ChaCha8Rng::seed_from_u64(2);
            let x = Tensor::rand_uniform(&[2, 8, 6, 6], -1.0, 1.0, &mut r2);
            let y = run_block(&mut store, x, Mode::Train, |t, x, c| ghost.forward(t, x, c));
            assert_eq!(y.shape(), &[2, n, 6, 6], "n={n} s={s}");
        }
    }

    #[test]
    fn ghost_rejects_width_below_ratio() {
        assert!(GhostSpec::new(1, 2, 1, 3).is_err());
    }

    #[test]
    fn ghost_parameter_count_matches_closed_form() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = Builder::new(&mut store, &mut rng);
        let spec = GhostSpec::new(64, 2, 1, 3).unwrap();
        let _ghost = GhostConv::build(&mut b, "g", 64, spec, 1);
        // primary 64*32*1*1 = 2048, cheap 32*3*3 = 288
        assert_eq!(store.count_elements("g.primary", ".weight"), 2048);
        assert_eq!(store.count_elements("g.cheap", ".weight"), 288);
        let total = store.count_elements("g.", ".weight");
        assert_eq!(total, 2336);
        assert_eq!(total, spec.weight_count(64));
        // standard 1x1 conv with the same shape costs 64*64 = 4096
        let ratio = total as f64 / 4096.0;
        assert!(
            (ratio - 0.5703125).abs() < 1e-12,
            "ghost/standard ratio {ratio}"
        );
    }

    #[test]
    fn ghost_zero_weights_give_zero_pre_bn_output() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut b = Builder::new(&mut store, &mut rng);
        let spec = GhostSpec::new(16, 2, 1, 3).unwrap();
        let ghost = GhostConv::build(&mut b, "g", 8, spec, 1);
        for (_, t) in store.params_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::rand_uniform(&[1, 8, 4, 4], -1.0, 1.0, &mut r2);
        // inspect the concat before bn: primary and cheap convs of zero weights
        let mut tape = Tape::new();
        let vars = stage_params(&mut tape, &store, false);
        let xv = tape.constant(x);
        let ctx = FwdCtx { vars: &vars, bn_states: store.bn_states_mut(), mode: Mode::Infer };
        let intrinsic = ghost.primary.forward(&mut tape, xv, &ctx).unwrap();
        let cheap = ghost.cheap.forward(&mut tape, intrinsic, &ctx).unwrap();
        assert!(tape.value(intrinsic).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(cheap).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cbs_order_differs_from_activation_first() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut b = Builder::new(&mut store, &mut rng);
        let cbs = Cbs::build(&mut b, "c", 3, 4, 3, 1);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::rand_uniform(&[2, 3, 6, 6], -1.0, 1.0, &mut r2);

        let mut tape = Tape::new();
        let vars = stage_params(&mut tape, &store, false);
        let xv = tape.constant(x);
        let mut states_a = store.bn_states_mut().to_vec();
        let mut ctx = FwdCtx { vars: &vars, bn_states: &mut states_a, mode: Mode::Train };
        let normal = cbs.forward(&mut tape, xv, &mut ctx).unwrap();
        // swapped order: silu before bn
        let conv = cbs.conv.forward(&mut tape, xv, &ctx).unwrap();
        let act = tape.silu(conv);
        let swapped = cbs.bn.forward(&mut tape, act, &mut ctx).unwrap();
        let diff = tape
            .value(normal)
            .data()
            .iter()
            .zip(tape.value(swapped).data())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-6, "bn/activation order must matter, diff {diff}");
    }

    #[test]
    fn cbs_stride_two_halves_spatial_dims() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut b = Builder::new(&mut store, &mut rng);
        let cbs = Cbs::build(&mut b, "c", 3, 8, 3, 2);
        let x = Tensor::zeros(&[1, 3, 64, 64]);
        let y = run_block(&mut store, x, Mode::Infer, |t, x, c| cbs.forward(t, x, c));
        assert_eq!(y.shape(), &[1, 8, 32, 32]);
    }

    #[test]
    fn cbam_zero_parameters_gate_at_exactly_one_quarter() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut b = Builder::new(&mut store, &mut rng);
        let cbam = Cbam::build(&mut b, "a", CbamSpec::new(16, 16, 7));
        for (_, t) in store.params_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let mut r2 = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::rand_uniform(&[2, 16, 5, 5], -2.0, 2.0, &mut r2);
        let y = run_block(&mut store, x.clone(), Mode::Infer, |t, x, c| cbam.forward(t, x, c));
        for (&o, &i) in y.data().iter().zip(x.data()) {
            assert_eq!(o, 0.25 * i);
        }
    }

    #[test]
    fn cbam_never_amplifies() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut b = Builder::new(&mut store, &mut rng);
        let cbam = Cbam::build(&mut b, "a", CbamSpec::new(8, 4, 7));
        let mut r2 = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::rand_uniform(&[2, 8, 6, 6], -3.0, 3.0, &mut r2);
        let y = run_block(&mut store, x.clone(), Mode::Infer, |t, x, c| cbam.forward(t, x, c));
        for (&o, &i) in y.data().iter().zip(x.data()) {
            assert!(o.abs() <= i.abs());
        }
    }

    #[test]
    fn cbam_zero_input_stays_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut b = Builder::new(&mut store, &mut rng);
        let cbam = Cbam::build(&mut b, "a", CbamSpec::new(8, 4, 7));
        let x = Tensor::zeros(&[1, 8, 4, 4]);
        let y = run_block(&mut store, x, Mode::Infer, |t, x, c| cbam.forward(t, x, c));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_attention_shape_and_midpoint() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut b = Builder::new(&mut store, &mut rng);
        let cbam = Cbam::build(&mut b, "a", CbamSpec::new(32, 16, 7));
        for (_, t) in store.params_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let mut r2 = ChaCha8Rng::seed_from_u64(15);
        let x = Tensor::rand_uniform(&[3, 32, 9, 7], -1.0, 1.0, &mut r2);
        let mut tape = Tape::new();
        let vars = stage_params(&mut tape, &store, false);
        let xv = tape.constant(x);
        let ctx = FwdCtx { vars: &vars, bn_states: store.bn_states_mut(), mode: Mode::Infer };
        let mc = cbam.channel_attention(&mut tape, xv, &ctx).unwrap();
        assert_eq!(tape.value(mc).shape(), &[3, 32, 1, 1]);
        assert!(tape.value(mc).data().iter().all(|&v| v == 0.5));
        let ms = cbam.spatial_attention(&mut tape, xv, &ctx).unwrap();
        assert_eq!(tape.value(ms).shape(), &[3, 1, 9, 7]);
        assert!(tape.value(ms).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn sppf_preserves_space_and_multiplies_hidden() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut b = Builder::new(&mut store, &mut rng);
        let sppf = Sppf::build(&mut b, "s", 32, 32, 16);
        let mut r2 = ChaCha8Rng::seed_from_u64(17);
        let x = Tensor::rand_uniform(&[1, 32, 8, 8], -1.0, 1.0, &mut r2);
        let y = run_block(&mut store, x, Mode::Train, |t, x, c| sppf.forward(t, x, c));
        assert_eq!(y.shape(), &[1, 32, 8, 8]);
        // concat width before the fuse conv
        assert_eq!(sppf.cv2.conv.spec.in_channels, 4 * 16);
    }

    #[test]
    fn sppf_constant_input_pools_to_constant() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut b = Builder::new(&mut store, &mut rng);
        let sppf = Sppf::build(&mut b, "s", 4, 4, 2);
        let x = Tensor::full(&[1, 4, 6, 6], 3.0);
        let mut tape = Tape::new();
        let vars = stage_params(&mut tape, &store, false);
        let xv = tape.constant(x);
        let mut ctx = FwdCtx { vars: &vars, bn_states: store.bn_states_mut(), mode: Mode::Infer };
        let y = sppf.cv1.forward(&mut tape, xv, &mut ctx).unwrap();
        let p1 = tape.pool2d(y, PoolKind::Max, 5, 1, 2).unwrap();
        // max pooling a constant map stays constant
        for (a, b) in tape.value(y).data().iter().zip(tape.value(p1).data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn c2f_residual_identity_with_zero_bottleneck() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut b = Builder::new(&mut store, &mut rng);
        let c2f = C2f::build(&mut b, "f", 16, 16, 1);
        // zero only the bottleneck convolutions
        for (name, t) in store.params_mut() {
            if name.starts_with("f.m0") && name.ends_with(".weight") {
                *t = Tensor::zeros(t.shape());
            }
        }
        let mut r2 = ChaCha8Rng::seed_from_u64(20);
        let x = Tensor::rand_uniform(&[1, 16, 4, 4], -1.0, 1.0, &mut r2);
        let mut tape = Tape::new();
        let vars = stage_params(&mut tape, &store, false);
        let xv = tape.constant(x);
        let mut ctx = FwdCtx { vars: &vars, bn_states: store.bn_states_mut(), mode: Mode::Infer };
        let y = c2f.cv1.forward(&mut tape, xv, &mut ctx).unwrap();
        let half = tape.slice(y, 1, 8, 8);
        let out = c2f.bottlenecks[0].forward(&mut tape, half, &mut ctx).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(half).data());
    }

    #[test]
    fn c2f_output_shape_contract() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut b = Builder::new(&mut store, &mut rng);
        let c2f = C2f::build(&mut b, "f", 24, 32, 2);
        let x = Tensor::zeros(&[2, 24, 10, 14]);
        let y = run_block(&mut store, x, Mode::Infer, |t, x, c| c2f.forward(t, x, c));
        assert_eq!(y.shape(), &[2, 32, 10, 14]);
    }

    #[test]
    fn c3_ghost_is_strictly_smaller_than_standard_c3() {
        let mut store_g = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut b = Builder::new(&mut store_g, &mut rng);
        let _ghost = C3Block::build(&mut b, "c3", 64, 64, 1, true);
        let ghost_total = store_g.total_elements();

        let mut store_s = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut b = Builder::new(&mut store_s, &mut rng);
        let _std = C3Block::build(&mut b, "c3", 64, 64, 1, false);
        let std_total = store_s.total_elements();
        assert!(
            ghost_total < std_total,
            "ghost block {ghost_total} not below standard {std_total}"
        );
    }

    #[test]
    fn c3_shapes_match_for_both_unit_kinds() {
        for ghost in [false, true] {
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            let mut b = Builder::new(&mut store, &mut rng);
            let c3 = C3Block::build(&mut b, "c3", 48, 32, 1, ghost);
            let x = Tensor::zeros(&[1, 48, 8, 8]);
            let y = run_block(&mut store, x, Mode::Infer, |t, x, c| c3.forward(t, x, c));
            assert_eq!(y.shape(), &[1, 32, 8, 8], "ghost={ghost}");
        }
    }

    #[test]
    fn deform_block_zero_branches_start_half_scaled() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut b = Builder::new(&mut store, &mut rng);
        let dcn = DeformCbs::build(&mut b, "d", 4, 6, 3, 1);
        let mut r2 = ChaCha8Rng::seed_from_u64(25);
        let x = Tensor::rand_uniform(&[1, 4, 6, 6], -1.0, 1.0, &mut r2);

        let mut tape = Tape::new();
        let vars = stage_params(&mut tape, &store, false);
        let xv = tape.constant(x);
        let ctx = FwdCtx { vars: &vars, bn_states: store.bn_states_mut(), mode: Mode::Infer };
        // freshly built branches are zero, so modulation sits at sigmoid(0)
        let offsets = dcn.offset.forward(&mut tape, xv, &ctx).unwrap();
        let raw = dcn.modulation.forward(&mut tape, xv, &ctx).unwrap();
        let modulation = tape.sigmoid(raw);
        assert!(tape.value(offsets).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(modulation).data().iter().all(|&v| v == 0.5));
        let dcn_out = tape
            .deform_conv2d(xv, ctx.var(dcn.weight), None, offsets, modulation, &dcn.spec)
            .unwrap();
        let conv_spec = ConvSpec::new(4, 6, 3, 1, 1, 1, false).unwrap();
        let conv_out = tape.conv2d(xv, ctx.var(dcn.weight), None, &conv_spec).unwrap();
        let half = tape.scale(conv_out, 0.5);
        let diff = tape
            .value(dcn_out)
            .data()
            .iter()
            .zip(tape.value(half).data())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "zero-init deformable head must be a half-scaled conv, diff {diff}");
    }
}
