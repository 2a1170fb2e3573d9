//! Detection model: backbone, fusion neck, multi-scale head, decoding,
//! and checkpoint I/O.

use crate::boxes::{Box2, DetectionBox};
use crate::kernels::Mode;
use crate::nn::blocks::{C2f, C3Block, Cbam, CbamSpec, Cbs, Conv, DeformCbs, Sppf};
use crate::nn::{stage_params, Builder, FwdCtx, Init, ParamStore};
use crate::scalar::{sigmoid, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub mod checkpoint;
pub use checkpoint::CheckpointError;

/// Detection strides; the smallest grid sees the smallest objects.
pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Fields of one prediction cell before the class logits.
pub const BOX_FIELDS: usize = 5; // tx, ty, tw, th, objectness

/// Cap on the raw size logit before the exponential.
pub const SIZE_LOGIT_CAP: f64 = 4.0;

/// Initial objectness bias; sigmoid of this is the starting foreground
/// prior at every cell.
pub const OBJ_PRIOR_LOGIT: f64 = -2.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("inconsistent channel plan at {layer}: {msg}")]
    Plan { layer: String, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Declarative architecture description.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub width_mult: f64,
    pub depth_mult: f64,
    pub use_ghost: bool,
    pub use_cbam: bool,
    pub use_dcn: bool,
    pub anchors_per_cell: usize,
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 4,
            class_names: ["Car", "Van", "Truck", "Tram"].map(String::from).to_vec(),
            width_mult: 1.0,
            depth_mult: 1.0,
            use_ghost: true,
            use_cbam: true,
            use_dcn: true,
            anchors_per_cell: 1,
            input_size: 640,
        }
    }
}

impl ModelConfig {
    /// Baseline network: all add-on modules disabled.
    pub fn baseline() -> Self {
        ModelConfig { use_ghost: false, use_cbam: false, use_dcn: false, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_classes == 0 || self.num_classes != self.class_names.len() {
            return Err(ModelError::Config(format!(
                "num_classes {} must match class_names ({})",
                self.num_classes,
                self.class_names.len()
            )));
        }
        for name in &self.class_names {
            if name.is_empty() || name.contains([',', ' ', '\t', '\n']) {
                return Err(ModelError::Config(format!("bad class name {name:?}")));
            }
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(ModelError::Config(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if !(self.width_mult > 0.0) || !(self.depth_mult > 0.0) {
            return Err(ModelError::Config("multipliers must be positive".into()));
        }
        if self.anchors_per_cell == 0 {
            return Err(ModelError::Config("anchors_per_cell must be at least 1".into()));
        }
        Ok(())
    }

    /// Channels per prediction cell: box fields plus class logits, per anchor.
    pub fn cell_fields(&self) -> usize {
        BOX_FIELDS + self.num_classes
    }
}

/// Channel width after applying the width multiplier; kept a multiple of 4
/// with a floor of 4 so every block's internal splits stay valid.
pub fn scaled_channels(base: usize, width_mult: f64) -> usize {
    let raw = (base as f64 * width_mult / 4.0).round() as usize * 4;
    raw.max(4)
}

/// Resolved channel plan (nano base: stem 16, stages 32/64/128/256).
#[derive(Clone, Debug)]
pub struct ChannelPlan {
    pub stem: usize,
    pub stages: [usize; 4],
    pub neck: [usize; 4],
    pub heads: [usize; 3],
    pub bottlenecks: usize,
}

impl ChannelPlan {
    pub fn resolve(cfg: &ModelConfig) -> ChannelPlan {
        let w = cfg.width_mult;
        let stages = [32, 64, 128, 256].map(|c| scaled_channels(c, w));
        let neck = [128, 64, 128, 256].map(|c| scaled_channels(c, w));
        ChannelPlan {
            stem: scaled_channels(16, w),
            stages,
            // head stem doubles its input width before the prediction branches
            heads: [2 * neck[1], 2 * neck[2], 2 * neck[3]],
            neck,
            bottlenecks: (cfg.depth_mult.round() as usize).max(1),
        }
    }
}

pub(crate) enum NeckBlock {
    C2f(C2f),
    C3Ghost(C3Block),
}

impl NeckBlock {
    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &mut FwdCtx<T>,
    ) -> Result<Var, TensorError> {
        match self {
            NeckBlock::C2f(b) => b.forward(tape, x, ctx),
            NeckBlock::C3Ghost(b) => b.forward(tape, x, ctx),
        }
    }
}

pub(crate) struct NeckLevel {
    pub(crate) block: NeckBlock,
    pub(crate) cbam: Option<Cbam>,
}

impl NeckLevel {
    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &mut FwdCtx<T>,
    ) -> Result<Var, TensorError> {
        let y = self.block.forward(tape, x, ctx)?;
        match &self.cbam {
            Some(attn) => attn.forward(tape, y, ctx),
            None => Ok(y),
        }
    }
}

pub(crate) enum HeadStem {
    Cbs(Cbs),
    Deform(DeformCbs),
}

impl HeadStem {
    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &mut FwdCtx<T>,
    ) -> Result<Var, TensorError> {
        match self {
            HeadStem::Cbs(b) => b.forward(tape, x, ctx),
            HeadStem::Deform(b) => b.forward(tape, x, ctx),
        }
    }
}

pub(crate) struct Head {
    pub(crate) stem: HeadStem,
    pub(crate) box_branch: Conv,
    pub(crate) cls_branch: Conv,
}

pub(crate) struct Net {
    pub(crate) stem: Cbs,
    pub(crate) downs: [Cbs; 4],
    pub(crate) stages: [C2f; 4],
    pub(crate) sppf: Sppf,
    pub(crate) neck: [NeckLevel; 4],
    pub(crate) neck_downs: [Cbs; 2],
    pub(crate) heads: [Head; 3],
}

/// Instantiated network: configuration, parameter registry, and the typed
/// layer graph.
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub(crate) net: Net,
}

/// One output scale still attached to the tape.
pub struct ScaleVar {
    pub var: Var,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
}

/// Raw multi-scale network output recorded on a tape.
pub struct RawPrediction {
    pub scales: Vec<ScaleVar>,
}

/// Materialized multi-scale output, `[B, A, H, W, 5 + C]` per scale.
pub struct Prediction {
    pub scales: Vec<(Tensor<f32>, usize)>,
    pub input_size: usize,
}

fn build_net<T: Scalar>(
    b: &mut Builder<T>,
    cfg: &ModelConfig,
) -> Result<Net, ModelError> {
    let plan = ChannelPlan::resolve(cfg);
    let n = plan.bottlenecks;
    let ghost = cfg.use_ghost;

    let stem = Cbs::build(b, "backbone.stem", 3, plan.stem, 3, 2);
    let mut downs = Vec::new();
    let mut stages = Vec::new();
    let mut prev = plan.stem;
    for (i, &c) in plan.stages.iter().enumerate() {
        downs.push(Cbs::build(b, &format!("backbone.down{}", i + 1), prev, c, 3, 2));
        stages.push(C2f::build(b, &format!("backbone.c2f{}", i + 1), c, c, n));
        prev = c;
    }
    let sppf = Sppf::build(b, "backbone.sppf", prev, prev, prev / 2);

    let [s1, s2, s3, s4] = plan.stages;
    let _ = s1;
    let neck_in = [s4 + s3, plan.neck[0] + s2, plan.neck[1] + plan.neck[0], plan.neck[2] + s4];
    let mut neck = Vec::new();
    for i in 0..4 {
        let path = format!("neck.t{}", i + 1);
        let cout = plan.neck[i];
        if cout / 2 == 0 {
            return Err(ModelError::Plan { layer: path, msg: "zero hidden width".into() });
        }
        let block = if ghost {
            NeckBlock::C3Ghost(C3Block::build(b, &path, neck_in[i], cout, n, true))
        } else {
            NeckBlock::C2f(C2f::build(b, &path, neck_in[i], cout, n))
        };
        let cbam = cfg
            .use_cbam
            .then(|| Cbam::build(b, &format!("{path}.cbam"), CbamSpec::new(cout, 16, 7)));
        neck.push(NeckLevel { block, cbam });
    }
    let neck_downs = [
        Cbs::build(b, "neck.down1", plan.neck[1], plan.neck[1], 3, 2),
        Cbs::build(b, "neck.down2", plan.neck[2], plan.neck[2], 3, 2),
    ];

    let head_in = [plan.neck[1], plan.neck[2], plan.neck[3]];
    let mut heads = Vec::new();
    for (i, (&cin, &cmid)) in head_in.iter().zip(&plan.heads).enumerate() {
        let path = format!("head.s{}", STRIDES[i]);
        let stem = if cfg.use_dcn {
            HeadStem::Deform(DeformCbs::build(b, &format!("{path}.stem"), cin, cmid, 3, 1))
        } else {
            HeadStem::Cbs(Cbs::build(b, &format!("{path}.stem"), cin, cmid, 3, 1))
        };
        let a = cfg.anchors_per_cell;
        let box_branch = Conv::build(
            b,
            &format!("{path}.box"),
            cmid,
            a * BOX_FIELDS,
            1,
            1,
            0,
            1,
            true,
            Init::ScaledUniform { fan_in: cmid },
        );
        // start objectness at a low prior so the rare positive cells are not
        // drowned out early in training
        if let Some(bias) = box_branch.bias {
            let t = b.store.param_mut(bias);
            for anchor in 0..a {
                t.data_mut()[anchor * BOX_FIELDS + 4] = T::from_f64(OBJ_PRIOR_LOGIT);
            }
        }
        let cls_branch = Conv::build(
            b,
            &format!("{path}.cls"),
            cmid,
            a * cfg.num_classes,
            1,
            1,
            0,
            1,
            true,
            Init::ScaledUniform { fan_in: cmid },
        );
        heads.push(Head { stem, box_branch, cls_branch });
    }

    Ok(Net {
        stem,
        downs: downs.try_into().map_err(|_| ModelError::Config("stage count".into())).unwrap(),
        stages: stages.try_into().map_err(|_| ModelError::Config("stage count".into())).unwrap(),
        sppf,
        neck: neck.try_into().map_err(|_| ModelError::Config("neck count".into())).unwrap(),
        neck_downs,
        heads: heads.try_into().map_err(|_| ModelError::Config("head count".into())).unwrap(),
    })
}

/// Builds a freshly initialized model; identical seeds give bitwise-identical
/// parameters.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>, ModelError> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut builder = Builder::new(&mut store, &mut rng);
    let net = build_net(&mut builder, config)?;
    Ok(Model { config: config.clone(), store, net })
}

impl<T: Scalar> Model<T> {
    /// Records the full forward pass on `tape`. Parameters are staged as
    /// gradient-requiring leaves when `train` is set, and batch-norm runs in
    /// train mode (updating running statistics).
    pub fn forward_on_tape(
        &mut self,
        tape: &mut Tape<T>,
        images: Var,
        train: bool,
    ) -> Result<(RawPrediction, Vec<Var>), ModelError> {
        let shape = tape.value(images).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(ModelError::Config(format!("expected [B,3,H,W] images, got {shape:?}")));
        }
        if shape[2] % 32 != 0 || shape[3] % 32 != 0 {
            return Err(ModelError::Config(format!(
                "spatial dims must be divisible by 32, got {}x{}",
                shape[2], shape[3]
            )));
        }
        let batch = shape[0];
        let vars = stage_params(tape, &self.store, train);
        let mode = if train { Mode::Train } else { Mode::Infer };
        let net = &self.net;
        let mut ctx = FwdCtx { vars: &vars, bn_states: self.store.bn_states_mut(), mode };

        let x = net.stem.forward(tape, images, &mut ctx)?;
        let mut feats = Vec::new();
        let mut cur = x;
        for (down, stage) in net.downs.iter().zip(&net.stages) {
            cur = down.forward(tape, cur, &mut ctx)?;
            cur = stage.forward(tape, cur, &mut ctx)?;
            feats.push(cur);
        }
        let p5 = net.sppf.forward(tape, feats[3], &mut ctx)?;

        // top-down fusion
        let up1 = tape.upsample_nearest2(p5);
        let cat1 = tape.concat(1, &[up1, feats[2]]);
        let t1 = net.neck[0].forward(tape, cat1, &mut ctx)?;
        let up2 = tape.upsample_nearest2(t1);
        let cat2 = tape.concat(1, &[up2, feats[1]]);
        let t2 = net.neck[1].forward(tape, cat2, &mut ctx)?;
        // bottom-up fusion
        let d1 = net.neck_downs[0].forward(tape, t2, &mut ctx)?;
        let cat3 = tape.concat(1, &[d1, t1]);
        let t3 = net.neck[2].forward(tape, cat3, &mut ctx)?;
        let d2 = net.neck_downs[1].forward(tape, t3, &mut ctx)?;
        let cat4 = tape.concat(1, &[d2, p5]);
        let t4 = net.neck[3].forward(tape, cat4, &mut ctx)?;

        let a = self.config.anchors_per_cell;
        let ncls = self.config.num_classes;
        let mut scales = Vec::new();
        for (i, (&feat, head)) in [t2, t3, t4].iter().zip(&net.heads).enumerate() {
            let stem = head.stem.forward(tape, feat, &mut ctx)?;
            let boxes = head.box_branch.forward(tape, stem, &mut ctx)?;
            let classes = head.cls_branch.forward(tape, stem, &mut ctx)?;
            let hs = tape.value(boxes).shape()[2];
            let ws = tape.value(boxes).shape()[3];
            let boxes = tape.reshape(boxes, &[batch, a, BOX_FIELDS, hs, ws]);
            let classes = tape.reshape(classes, &[batch, a, ncls, hs, ws]);
            let merged = tape.concat(2, &[boxes, classes]);
            let pred = tape.permute(merged, &[0, 1, 3, 4, 2]);
            scales.push(ScaleVar { var: pred, stride: STRIDES[i], h: hs, w: ws });
        }
        Ok((RawPrediction { scales }, vars))
    }

    /// Inference pass on a private tape, returning materialized outputs.
    pub fn predict(&mut self, images: &Tensor<T>) -> Result<Prediction, ModelError>
    where
        T: Scalar,
    {
        let mut tape = Tape::new();
        let images_var = tape.constant(images.clone());
        let (raw, _) = self.forward_on_tape(&mut tape, images_var, false)?;
        let scales = raw
            .scales
            .iter()
            .map(|s| {
                let v = tape.value(s.var);
                let data: Vec<f32> = v.data().iter().map(|x| x.to_f64() as f32).collect();
                (Tensor::new(v.shape(), data), s.stride)
            })
            .collect();
        Ok(Prediction { scales, input_size: self.config.input_size })
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.store.total_elements()
    }
}

/// Decodes raw grid predictions into scored boxes per batch item.
///
/// Cell semantics: center = (cell + sigmoid(txy)) * stride, size =
/// stride * exp(min(twh, cap)), confidence = sigmoid(obj) * max class
/// probability. Boxes are clipped to the input square.
pub fn decode_predictions(pred: &Prediction, conf_threshold: f64) -> Vec<Vec<DetectionBox>> {
    assert!((0.0..=1.0).contains(&conf_threshold), "confidence threshold in [0,1]");
    let img = pred.input_size as f64;
    let mut per_image: Vec<Vec<DetectionBox>> = Vec::new();
    for (tensor, stride) in &pred.scales {
        let shape = tensor.shape();
        let (b, a, h, w, fields) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
        let ncls = fields - BOX_FIELDS;
        per_image.resize_with(b.max(per_image.len()), Vec::new);
        let d = tensor.data();
        for bi in 0..b {
            for ai in 0..a {
                for gy in 0..h {
                    for gx in 0..w {
                        let base = ((((bi * a) + ai) * h + gy) * w + gx) * fields;
                        let cell = &d[base..base + fields];
                        let obj = sigmoid(cell[4]) as f64;
                        let mut best_cls = 0;
                        let mut best_logit = f32::NEG_INFINITY;
                        for (ci, &logit) in cell[BOX_FIELDS..BOX_FIELDS + ncls].iter().enumerate()
                        {
                            if logit > best_logit {
                                best_logit = logit;
                                best_cls = ci;
                            }
                        }
                        let conf = obj * sigmoid(best_logit) as f64;
                        if conf < conf_threshold {
                            continue;
                        }
                        let s = *stride as f64;
                        let cx = (gx as f64 + sigmoid(cell[0]) as f64) * s;
                        let cy = (gy as f64 + sigmoid(cell[1]) as f64) * s;
                        let bw = s * (cell[2] as f64).min(SIZE_LOGIT_CAP).exp();
                        let bh = s * (cell[3] as f64).min(SIZE_LOGIT_CAP).exp();
                        let bbox = Box2::from_center(cx, cy, bw, bh).clipped(img, img);
                        if bbox.is_valid() {
                            per_image[bi].push(DetectionBox { class: best_cls, confidence: conf, bbox });
                        }
                    }
                }
            }
        }
    }
    per_image
}
