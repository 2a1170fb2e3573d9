//! Parameter, multiply-accumulate, and memory accounting from closed-form
//! per-layer costs. The layer walk mirrors the forward graph, so its
//! parameter total must equal the registry total (cross-checked in tests).

use crate::model::{HeadStem, Model, NeckBlock, STRIDES};
use crate::nn::blocks::{Bottleneck, C2f, C3Block, C3Unit, Cbam, Cbs, Conv, DeformCbs, GhostConv, Sppf};
use crate::scalar::Scalar;
use std::fmt::Write as _;

/// Cost of one primitive layer.
#[derive(Clone, Debug)]
pub struct LayerCost {
    pub name: String,
    pub params: usize,
    pub macs: usize,
}

/// Whole-model complexity at a given input size.
#[derive(Clone, Debug)]
pub struct ComplexityReport {
    pub input_size: usize,
    pub params: usize,
    pub macs: usize,
    /// Parameter bytes at 4 bytes per scalar.
    pub memory_bytes: usize,
    pub layers: Vec<LayerCost>,
}

impl ComplexityReport {
    /// Reported convention: FLOPs = 2 x MACs.
    pub fn flops(&self) -> usize {
        2 * self.macs
    }

    pub fn params_millions(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn gflops(&self) -> f64 {
        self.flops() as f64 / 1e9
    }

    pub fn memory_mb(&self) -> f64 {
        self.memory_bytes as f64 / (1024.0 * 1024.0)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "complexity at {0}x{0} input (FLOPs = 2 x MACs)", self.input_size);
        let _ = writeln!(out, "  parameters = {} ({:.3} M)", self.params, self.params_millions());
        let _ = writeln!(out, "  flops      = {} ({:.3} GFLOPs)", self.flops(), self.gflops());
        let _ = writeln!(out, "  memory     = {} bytes ({:.2} MB)", self.memory_bytes, self.memory_mb());
        out
    }
}

struct Walk {
    layers: Vec<LayerCost>,
}

impl Walk {
    fn push(&mut self, name: String, params: usize, macs: usize) {
        self.layers.push(LayerCost { name, params, macs });
    }

    /// `pixels` is the number of output positions the kernel runs over.
    fn conv(&mut self, name: &str, spec: &crate::kernels::ConvSpec, pixels: usize) {
        let weights = spec.weight_count();
        let params = weights + if spec.bias { spec.out_channels } else { 0 };
        self.push(name.to_string(), params, weights * pixels);
    }

    fn conv_block(&mut self, name: &str, c: &Conv, pixels: usize) {
        self.conv(name, &c.spec, pixels);
    }

    fn bn(&mut self, name: &str, channels: usize, pixels: usize) {
        self.push(name.to_string(), 2 * channels, channels * pixels);
    }

    fn cbs(&mut self, name: &str, b: &Cbs, out_hw: (usize, usize)) {
        let px = out_hw.0 * out_hw.1;
        self.conv_block(&format!("{name}.conv"), &b.conv, px);
        self.bn(&format!("{name}.bn"), b.conv.spec.out_channels, px);
    }

    fn ghost(&mut self, name: &str, g: &GhostConv, out_hw: (usize, usize)) {
        let px = out_hw.0 * out_hw.1;
        self.conv_block(&format!("{name}.primary"), &g.primary, px);
        self.conv_block(&format!("{name}.cheap"), &g.cheap, px);
        self.bn(&format!("{name}.bn"), g.spec.out_channels, px);
    }

    fn unit(&mut self, name: &str, u: &C3Unit, out_hw: (usize, usize)) {
        match u {
            C3Unit::Std(c) => self.cbs(name, c, out_hw),
            C3Unit::Ghost(g) => self.ghost(name, g, out_hw),
        }
    }

    fn bottleneck(&mut self, name: &str, b: &Bottleneck, hw: (usize, usize)) {
        self.unit(&format!("{name}.cv1"), &b.cv1, hw);
        self.unit(&format!("{name}.cv2"), &b.cv2, hw);
    }

    fn c2f(&mut self, name: &str, b: &C2f, hw: (usize, usize)) {
        self.cbs(&format!("{name}.cv1"), &b.cv1, hw);
        for (i, bt) in b.bottlenecks.iter().enumerate() {
            self.bottleneck(&format!("{name}.m{i}"), bt, hw);
        }
        self.cbs(&format!("{name}.cv2"), &b.cv2, hw);
    }

    fn c3(&mut self, name: &str, b: &C3Block, hw: (usize, usize)) {
        self.unit(&format!("{name}.cv1"), &b.cv1, hw);
        self.unit(&format!("{name}.cv2"), &b.cv2, hw);
        for (i, bt) in b.bottlenecks.iter().enumerate() {
            self.bottleneck(&format!("{name}.m{i}"), bt, hw);
        }
        self.unit(&format!("{name}.cv3"), &b.cv3, hw);
    }

    fn sppf(&mut self, name: &str, b: &Sppf, hw: (usize, usize)) {
        self.cbs(&format!("{name}.cv1"), &b.cv1, hw);
        self.cbs(&format!("{name}.cv2"), &b.cv2, hw);
    }

    fn cbam(&mut self, name: &str, b: &Cbam, hw: (usize, usize)) {
        // the shared MLP runs on two pooled descriptors
        self.conv_block(&format!("{name}.fc1"), &b.fc1, 2);
        self.conv_block(&format!("{name}.fc2"), &b.fc2, 2);
        self.conv_block(&format!("{name}.spatial"), &b.spatial, hw.0 * hw.1);
    }

    fn deform(&mut self, name: &str, b: &DeformCbs, hw: (usize, usize)) {
        let px = hw.0 * hw.1;
        self.conv_block(&format!("{name}.offset"), &b.offset, px);
        self.conv_block(&format!("{name}.modulation"), &b.modulation, px);
        let spec = &b.spec;
        let taps = spec.taps();
        let weights = spec.out_channels * spec.in_channels * taps;
        // main conv plus 4 MACs per bilinear sample plus the per-sample
        // modulation scaling
        let macs = weights * px + 4 * spec.in_channels * taps * px + spec.in_channels * taps * px;
        self.push(format!("{name}.weight"), weights, macs);
        self.bn(&format!("{name}.bn"), spec.out_channels, px);
    }
}

/// Walks the layer graph and prices every layer from closed forms: conv
/// MACs are `weights x output pixels`, batch norm one multiply-add per
/// element, deformable sampling 4 MACs per sampled point. Elementwise
/// activations, pooling, and concatenation carry no multiply-accumulates.
pub fn count_params_flops<T: Scalar>(model: &Model<T>) -> ComplexityReport {
    let size = model.config.input_size;
    let net = &model.net;
    let mut w = Walk { layers: Vec::new() };

    let half = |n: usize| n.div_ceil(2);
    let mut hw = (half(size), half(size));
    w.cbs("backbone.stem", &net.stem, hw);
    let mut stage_hw = Vec::new();
    for (i, (down, stage)) in net.downs.iter().zip(&net.stages).enumerate() {
        hw = (half(hw.0), half(hw.1));
        w.cbs(&format!("backbone.down{}", i + 1), down, hw);
        w.c2f(&format!("backbone.c2f{}", i + 1), stage, hw);
        stage_hw.push(hw);
    }
    w.sppf("backbone.sppf", &net.sppf, hw);

    // neck levels run at strides 16, 8, 16, 32
    let level_hw = [stage_hw[2], stage_hw[1], stage_hw[2], stage_hw[3]];
    for (i, (level, hw)) in net.neck.iter().zip(level_hw).enumerate() {
        let name = format!("neck.t{}", i + 1);
        match &level.block {
            NeckBlock::C2f(b) => w.c2f(&name, b, hw),
            NeckBlock::C3Ghost(b) => w.c3(&name, b, hw),
        }
        if let Some(cbam) = &level.cbam {
            w.cbam(&format!("{name}.cbam"), cbam, hw);
        }
    }
    w.cbs("neck.down1", &net.neck_downs[0], level_hw[2]);
    w.cbs("neck.down2", &net.neck_downs[1], level_hw[3]);

    for (i, head) in net.heads.iter().enumerate() {
        let stride = STRIDES[i];
        let hw = (size / stride, size / stride);
        let name = format!("head.s{stride}");
        match &head.stem {
            HeadStem::Cbs(b) => w.cbs(&format!("{name}.stem"), b, hw),
            HeadStem::Deform(b) => w.deform(&format!("{name}.stem"), b, hw),
        }
        w.conv_block(&format!("{name}.box"), &head.box_branch, hw.0 * hw.1);
        w.conv_block(&format!("{name}.cls"), &head.cls_branch, hw.0 * hw.1);
    }

    let params: usize = w.layers.iter().map(|l| l.params).sum();
    let macs: usize = w.layers.iter().map(|l| l.macs).sum();
    ComplexityReport {
        input_size: size,
        params,
        macs,
        memory_bytes: params * 4,
        layers: w.layers,
    }
}
