//! Training loop: target assignment, composite detection loss, Adam with
//! cosine learning-rate annealing, and mAP-based early stopping.

use crate::boxes::Box2;
use crate::data::{augment, normalize, AugmentConfig, Annotation, Dataset, Sample};
use crate::eval::{gts_from_annotations, map_at, nms, EvalReport};
use crate::model::{decode_predictions, Model, ModelError, RawPrediction, BOX_FIELDS, SIZE_LOGIT_CAP};
use crate::nn::ParamStore;
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Optimizer, scheduler, and loss weights.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub eta_min: f64,
    pub patience: usize,
    pub epochs: usize,
    pub lambda_box: f64,
    pub lambda_obj: f64,
    pub lambda_cls: f64,
    pub augment: bool,
    pub aug: AugmentConfig,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub eval_conf: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let lr0 = 0.001;
        TrainConfig {
            batch_size: 32,
            lr0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eta_min: lr0 / 100.0,
            patience: 10,
            epochs: 150,
            lambda_box: 5.0,
            lambda_obj: 1.0,
            lambda_cls: 0.5,
            augment: true,
            aug: AugmentConfig::default(),
            mean: [0.0; 3],
            std: [1.0; 3],
            eval_conf: 0.001,
            nms_iou: 0.45,
            match_iou: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn with_lr(lr0: f64) -> Self {
        TrainConfig { lr0, eta_min: lr0 / 100.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config("batch size and epochs must be positive".into()));
        }
        if self.patience > self.epochs {
            return Err(TrainError::Config(format!(
                "patience {} exceeds epochs {}",
                self.patience, self.epochs
            )));
        }
        if !(self.lr0 >= 0.0 && self.eta_min >= 0.0) {
            return Err(TrainError::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Size bands assigning a truth box to a detection scale by `sqrt(area)`.
pub const SCALE_BANDS: [f64; 2] = [64.0, 160.0];

/// One assigned positive cell.
#[derive(Clone, Debug)]
pub struct PositiveCell {
    /// Row into the `[B*A*H*W, fields]` flattened scale tensor.
    pub row: usize,
    pub cell_x: usize,
    pub cell_y: usize,
    pub class: usize,
    pub target: Box2,
}

/// Per-scale assignment for a whole batch.
#[derive(Clone, Debug)]
pub struct ScaleTargets {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    /// Objectness target per `[B*A*H*W]` row.
    pub obj: Vec<f32>,
    pub positives: Vec<PositiveCell>,
}

/// Assignment for every scale plus the dropped-collision counter.
#[derive(Clone, Debug)]
pub struct TargetMap {
    pub scales: Vec<ScaleTargets>,
    pub collisions: usize,
}

fn scale_for_box(b: &Box2) -> usize {
    let side = b.area().sqrt();
    if side < SCALE_BANDS[0] {
        0
    } else if side < SCALE_BANDS[1] {
        1
    } else {
        2
    }
}

/// Assigns each target box to one scale by size and to the cell containing
/// its center; anchor slots fill in order and collisions keep the larger
/// box.
pub fn assign_targets(
    annotations: &[Vec<Annotation>],
    grids: &[(usize, usize)],
    strides: &[usize],
    anchors: usize,
) -> TargetMap {
    let batch = annotations.len();
    let mut scales: Vec<ScaleTargets> = grids
        .iter()
        .zip(strides)
        .map(|(&(h, w), &stride)| ScaleTargets {
            stride,
            h,
            w,
            obj: vec![0.0; batch * anchors * h * w],
            positives: Vec::new(),
        })
        .collect();
    let mut collisions = 0usize;
    // slot occupancy: (scale, row) -> index into positives
    let mut occupancy: std::collections::HashMap<(usize, usize), usize> =
        std::collections::HashMap::new();

    for (bi, anns) in annotations.iter().enumerate() {
        for ann in anns {
            if !ann.is_target() {
                continue;
            }
            let si = scale_for_box(&ann.bbox).min(scales.len() - 1);
            let st = &mut scales[si];
            let (cx, cy) = ann.bbox.center();
            let gx = ((cx / st.stride as f64).floor() as usize).min(st.w - 1);
            let gy = ((cy / st.stride as f64).floor() as usize).min(st.h - 1);

            let mut chosen: Option<usize> = None; // row
            let mut victim: Option<usize> = None; // positives index to replace
            let mut smallest: Option<(usize, f64, usize)> = None; // (row, area, pos idx)
            for a in 0..anchors {
                let row = ((bi * anchors + a) * st.h + gy) * st.w + gx;
                match occupancy.get(&(si, row)) {
                    None => {
                        chosen = Some(row);
                        break;
                    }
                    Some(&pi) => {
                        let area = st.positives[pi].target.area();
                        if smallest.map(|(_, sa, _)| area < sa).unwrap_or(true) {
                            smallest = Some((row, area, pi));
                        }
                    }
                }
            }
            if chosen.is_none() {
                let (row, area, pi) = smallest.expect("at least one anchor slot");
                if ann.bbox.area() > area {
                    chosen = Some(row);
                    victim = Some(pi);
                }
                collisions += 1;
            }
            let Some(row) = chosen else { continue };
            let class = ann.class.expect("targets carry a class");
            let cell = PositiveCell { row, cell_x: gx, cell_y: gy, class, target: ann.bbox };
            match victim {
                Some(pi) => st.positives[pi] = cell,
                None => {
                    st.obj[row] = 1.0;
                    occupancy.insert((si, row), st.positives.len());
                    st.positives.push(cell);
                }
            }
        }
    }
    TargetMap { scales, collisions }
}

/// Loss components in raw (unweighted) form.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub obj: f64,
    pub cls: f64,
    pub box_: f64,
    pub total: f64,
}

/// Composite detection loss on the tape: objectness binary cross-entropy
/// over every cell, class binary cross-entropy over positive cells, and
/// one-minus-IoU over positive cells through the decoding law.
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    raw: &RawPrediction,
    targets: &TargetMap,
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<(Var, LossParts), TensorError> {
    assert_eq!(raw.scales.len(), targets.scales.len(), "scale count mismatch");
    let mut obj_sum: Option<Var> = None;
    let mut cls_sum: Option<Var> = None;
    let mut box_sum: Option<Var> = None;
    let mut total_cells = 0usize;
    let mut total_pos = 0usize;

    let add_to = |tape: &mut Tape<T>, acc: &mut Option<Var>, v: Var| {
        *acc = Some(match acc {
            Some(prev) => tape.add(*prev, v),
            None => v,
        });
    };

    for (scale, st) in raw.scales.iter().zip(&targets.scales) {
        let shape = tape.value(scale.var).shape().to_vec();
        let fields = shape[4];
        assert_eq!(fields, BOX_FIELDS + num_classes, "field count mismatch");
        let rows: usize = shape[..4].iter().product();
        let flat = tape.reshape(scale.var, &[rows, fields]);
        total_cells += rows;

        // objectness over every cell
        let obj_col = tape.slice(flat, 1, 4, 1);
        let obj_target =
            Tensor::new(&[rows, 1], st.obj.iter().map(|&v| T::from_f64(v as f64)).collect());
        let obj_bce = tape.bce_with_logits(obj_col, obj_target);
        let s = tape.sum_all(obj_bce);
        add_to(tape, &mut obj_sum, s);

        if st.positives.is_empty() {
            continue;
        }
        total_pos += st.positives.len();
        let rows_idx: Vec<usize> = st.positives.iter().map(|p| p.row).collect();
        let pos = tape.gather_rows(flat, rows_idx);
        let p = st.positives.len();

        // classification over positive cells
        let cls_logits = tape.slice(pos, 1, BOX_FIELDS, num_classes);
        let mut one_hot = Tensor::zeros(&[p, num_classes]);
        for (i, cell) in st.positives.iter().enumerate() {
            one_hot.data_mut()[i * num_classes + cell.class] = T::one();
        }
        let cls_bce = tape.bce_with_logits(cls_logits, one_hot);
        let s = tape.sum_all(cls_bce);
        add_to(tape, &mut cls_sum, s);

        // localization: decode and compare with the assigned boxes by IoU
        let col = |tape: &mut Tape<T>, c: usize| {
            let sl = tape.slice(pos, 1, c, 1);
            tape.reshape(sl, &[p])
        };
        let stride = st.stride as f64;
        let cell_x =
            Tensor::new(&[p], st.positives.iter().map(|c| T::from_f64(c.cell_x as f64)).collect());
        let cell_y =
            Tensor::new(&[p], st.positives.iter().map(|c| T::from_f64(c.cell_y as f64)).collect());
        let tx = col(tape, 0);
        let ty = col(tape, 1);
        let tw = col(tape, 2);
        let th = col(tape, 3);
        let sx = tape.sigmoid(tx);
        let sy = tape.sigmoid(ty);
        let cxv = tape.constant(cell_x);
        let cyv = tape.constant(cell_y);
        let cx = tape.add(sx, cxv);
        let cx = tape.scale(cx, stride);
        let cy = tape.add(sy, cyv);
        let cy = tape.scale(cy, stride);
        let cap = tape.constant(Tensor::full(&[p], T::from_f64(SIZE_LOGIT_CAP)));
        let twc = tape.emin(tw, cap);
        let thc = tape.emin(th, cap);
        let ew = tape.exp(twc);
        let eh = tape.exp(thc);
        let w = tape.scale(ew, stride);
        let h = tape.scale(eh, stride);

        let half_w = tape.scale(w, 0.5);
        let half_h = tape.scale(h, 0.5);
        let left = tape.sub(cx, half_w);
        let right = tape.add(cx, half_w);
        let top = tape.sub(cy, half_h);
        let bottom = tape.add(cy, half_h);

        let tgt = |f: &dyn Fn(&Box2) -> f64| {
            Tensor::new(&[p], st.positives.iter().map(|c| T::from_f64(f(&c.target))).collect())
        };
        let tl = tape.constant(tgt(&|b| b.left));
        let tr = tape.constant(tgt(&|b| b.right));
        let tt = tape.constant(tgt(&|b| b.top));
        let tb = tape.constant(tgt(&|b| b.bottom));
        let t_area = tape.constant(tgt(&|b| b.area()));

        let il = tape.emax(left, tl);
        let ir = tape.emin(right, tr);
        let it = tape.emax(top, tt);
        let ib = tape.emin(bottom, tb);
        let iw_raw = tape.sub(ir, il);
        let iw = tape.relu(iw_raw);
        let ih_raw = tape.sub(ib, it);
        let ih = tape.relu(ih_raw);
        let inter = tape.mul(iw, ih);
        let pred_area = tape.mul(w, h);
        let sum_areas = tape.add(pred_area, t_area);
        let union = tape.sub(sum_areas, inter);
        let iou = tape.div(inter, union);
        let neg = tape.scale(iou, -1.0);
        let one_minus = tape.add_scalar(neg, 1.0);
        let s = tape.sum_all(one_minus);
        add_to(tape, &mut box_sum, s);
    }

    let zero = tape.constant(Tensor::scalar(T::zero()));
    let obj_mean = {
        let s = obj_sum.unwrap_or(zero);
        tape.scale(s, 1.0 / total_cells.max(1) as f64)
    };
    // class term is averaged per positive cell (summed over class logits)
    let cls_mean = match cls_sum {
        Some(s) => tape.scale(s, 1.0 / total_pos.max(1) as f64),
        None => zero,
    };
    let box_mean = match box_sum {
        Some(s) => tape.scale(s, 1.0 / total_pos.max(1) as f64),
        None => zero,
    };
    let wo = tape.scale(obj_mean, cfg.lambda_obj);
    let wc = tape.scale(cls_mean, cfg.lambda_cls);
    let wb = tape.scale(box_mean, cfg.lambda_box);
    let t = tape.add(wo, wc);
    let total = tape.add(t, wb);
    let parts = LossParts {
        obj: tape.value(obj_mean).item().to_f64(),
        cls: tape.value(cls_mean).item().to_f64(),
        box_: tape.value(box_mean).item().to_f64(),
        total: tape.value(total).item().to_f64(),
    };
    Ok((total, parts))
}

/// First-moment/second-moment optimizer state, one slot per parameter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let m = store.params().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let v = store.params().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState { m, v, step: 0 }
    }
}

/// One bias-corrected optimizer step over the whole registry.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if grads.len() != state.m.len() {
        return Err(TrainError::Config(format!(
            "gradient count {} does not match parameter count {}",
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - cfg.beta1.powf(t));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powf(t));
    let lr_t = T::from_f64(lr);
    let eps = T::from_f64(cfg.adam_eps);

    for (i, (name, p)) in store.params_mut().enumerate() {
        let g = &grads[i];
        if !p.same_shape(g) {
            return Err(TrainError::Config(format!(
                "gradient shape mismatch for {name}: {:?} vs {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for ((pv, &gv), (mv, vv)) in
            p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine annealing: `eta_min + (lr0 - eta_min) * (1 + cos(pi e / E)) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64, eta_min: f64) -> f64 {
    assert!(epoch <= total_epochs, "epoch past schedule end");
    let progress = epoch as f64 / total_epochs.max(1) as f64;
    eta_min + 0.5 * (lr0 - eta_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Improvement threshold for early stopping.
pub const IMPROVE_EPS: f64 = 1e-6;

/// True when the validation mAP has not improved for `patience` consecutive
/// epochs.
pub fn early_stop_check(map_history: &[f64], patience: usize) -> bool {
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0usize;
    for &v in map_history {
        if v > best + IMPROVE_EPS {
            best = v;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    stale >= patience && patience > 0
}

/// Per-epoch record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub seconds: f64,
}

/// Epoch-by-epoch training record; the data behind loss/metric curves.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

impl History {
    /// Tab-separated table: epoch, loss, precision, recall, map50, seconds.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\tloss\tprecision\trecall\tmap50\tseconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.3}\n",
                e.epoch, e.train_loss, e.precision, e.recall, e.map50, e.seconds
            ));
        }
        out
    }

    pub fn map_series(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.map50).collect()
    }
}

/// Training outcome: the history plus the best-mAP checkpoint snapshot.
pub struct TrainOutcome {
    pub history: History,
    pub best_epoch: usize,
    pub best_map50: f64,
    pub best_checkpoint: Vec<u8>,
    pub collisions: usize,
}

/// Stacks normalized sample images into a `[B, 3, S, S]` batch.
pub fn batch_images(samples: &[Sample], mean: [f64; 3], std: [f64; 3]) -> Tensor<f32> {
    assert!(!samples.is_empty());
    let s = samples[0].image.shape().to_vec();
    let per = samples[0].image.numel();
    let mut data = Vec::with_capacity(samples.len() * per);
    for sample in samples {
        assert_eq!(sample.image.shape(), &s[..], "batch images must share a shape");
        let n = normalize(&sample.image, mean, std).expect("validated std");
        data.extend_from_slice(n.data());
    }
    Tensor::new(&[samples.len(), 3, s[1], s[2]], data)
}

/// Runs detection over a dataset and scores it.
pub fn evaluate(
    model: &mut Model<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<EvalReport, TrainError> {
    let img_size = model.config.input_size;
    let prepared = dataset.letterboxed(img_size);
    let mut dets_all = Vec::with_capacity(prepared.len());
    let mut gts_all = Vec::with_capacity(prepared.len());
    for chunk in prepared.samples.chunks(cfg.batch_size.max(1)) {
        let images = batch_images(chunk, cfg.mean, cfg.std);
        let pred = model.predict(&images)?;
        let decoded = decode_predictions(&pred, cfg.eval_conf);
        for (i, sample) in chunk.iter().enumerate() {
            let kept = nms(&decoded[i], cfg.nms_iou);
            dets_all.push(kept);
            gts_all.push(gts_from_annotations(&sample.annotations));
        }
    }
    Ok(map_at(&dets_all, &gts_all, cfg.match_iou, &dataset.class_names))
}

/// Full training procedure: per batch augment, forward, assign, loss,
/// backward, optimizer step; per epoch validation, best-checkpoint tracking,
/// and early stopping.
pub fn train(
    model: &mut Model<f32>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let img_size = model.config.input_size;
    let prepared = train_set.letterboxed(img_size);
    let anchors = model.config.anchors_per_cell;
    let num_classes = model.config.num_classes;

    let mut adam = AdamState::new(&model.store);
    let mut history = History::default();
    let mut best_map50 = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_checkpoint = model.to_bytes();
    let mut collisions_total = 0usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.eta_min);
        let order = prepared.shuffled_indices(derive_seed(seed, &[epoch as u64, 0x5u64]));
        let mut loss_acc = 0.0;
        let mut batches = 0usize;

        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                            seed,
                            &[epoch as u64, i as u64, 0xA],
                        ));
                        augment(&prepared.samples[i], &prepared.samples, &cfg.aug, &mut rng)
                    } else {
                        prepared.samples[i].clone()
                    }
                })
                .collect();
            let images = batch_images(&samples, cfg.mean, cfg.std);

            let mut tape = Tape::new();
            let images_var = tape.constant(images);
            let (raw, param_vars) = model.forward_on_tape(&mut tape, images_var, true)?;
            let grids: Vec<(usize, usize)> = raw.scales.iter().map(|s| (s.h, s.w)).collect();
            let strides: Vec<usize> = raw.scales.iter().map(|s| s.stride).collect();
            let anns: Vec<Vec<Annotation>> =
                samples.iter().map(|s| s.annotations.clone()).collect();
            let targets = assign_targets(&anns, &grids, &strides, anchors);
            collisions_total += targets.collisions;

            let (total, parts) = detection_loss(&mut tape, &raw, &targets, num_classes, cfg)?;
            if !parts.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_idx });
            }
            tape.backward(total)?;
            let grads: Vec<Tensor<f32>> = param_vars
                .iter()
                .map(|&v| tape.grad(v).expect("parameter gradient").clone())
                .collect();
            adam_step(&mut model.store, &grads, &mut adam, lr, cfg)?;
            loss_acc += parts.total;
            batches += 1;
        }

        let report = evaluate(model, val_set, cfg)?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_acc / batches.max(1) as f64,
            precision: report.precision,
            recall: report.recall,
            map50: report.map50,
            seconds: started.elapsed().as_secs_f64(),
        };
        history.epochs.push(stats);

        if report.map50 > best_map50 + IMPROVE_EPS {
            best_map50 = report.map50;
            best_epoch = epoch;
            best_checkpoint = model.to_bytes();
        }
        if early_stop_check(&history.map_series(), cfg.patience) {
            break;
        }
    }

    Ok(TrainOutcome {
        history,
        best_epoch,
        best_map50: best_map50.max(0.0),
        best_checkpoint,
        collisions: collisions_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_fixed_points() {
        let lr0 = 0.001;
        let eta = lr0 / 100.0;
        assert!((cosine_lr(0, 150, lr0, eta) - lr0).abs() < 1e-12);
        assert!((cosine_lr(150, 150, lr0, eta) - eta).abs() < 1e-12);
        assert!((cosine_lr(75, 150, lr0, eta) - (lr0 + eta) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn early_stop_rules() {
        let improving: Vec<f64> = (0..30).map(|i| i as f64 / 30.0).collect();
        assert!(!early_stop_check(&improving, 10));
        let flat = vec![0.5; 11];
        assert!(early_stop_check(&flat, 10));
        assert!(!early_stop_check(&vec![0.5; 10], 10));
        let mut resets = vec![0.5; 10];
        resets.push(0.9);
        assert!(!early_stop_check(&resets, 10));
    }

    #[test]
    fn assignment_bands_and_cells() {
        let ann = |cx: f64, cy: f64, side: f64| Annotation {
            class_name: "a".into(),
            class: Some(0),
            truncated: 0.0,
            occluded: 0,
            bbox: Box2::from_center(cx, cy, side, side),
            dont_care: false,
        };
        let grids = [(80, 80), (40, 40), (20, 20)];
        let strides = [8, 16, 32];
        // 32x32 box at (100, 100): small band, cell floor(100/8) = 12
        let tm = assign_targets(&[vec![ann(100.0, 100.0, 32.0)]], &grids, &strides, 1);
        assert_eq!(tm.scales[0].positives.len(), 1);
        let p = &tm.scales[0].positives[0];
        assert_eq!((p.cell_x, p.cell_y), (12, 12));
        assert_eq!(tm.collisions, 0);

        // 200x200 box lands on the coarsest scale
        let tm = assign_targets(&[vec![ann(300.0, 300.0, 200.0)]], &grids, &strides, 1);
        assert!(tm.scales[2].positives.len() == 1);

        // identical boxes collide; one survives
        let tm = assign_targets(
            &[vec![ann(100.0, 100.0, 32.0), ann(100.0, 100.0, 32.0)]],
            &grids,
            &strides,
            1,
        );
        assert_eq!(tm.scales[0].positives.len(), 1);
        assert_eq!(tm.collisions, 1);

        // larger box wins its cell
        let tm = assign_targets(
            &[vec![ann(100.0, 100.0, 20.0), ann(101.0, 101.0, 40.0)]],
            &grids,
            &strides,
            1,
        );
        assert_eq!(tm.scales[0].positives.len(), 1);
        assert!((tm.scales[0].positives[0].target.width() - 40.0).abs() < 1e-9);
        assert_eq!(tm.collisions, 1);
    }

    #[test]
    fn adam_fixed_points() {
        let cfg = TrainConfig::default();
        let mut store = ParamStore::<f64>::new();
        store.add_param("p".into(), Tensor::scalar(1.0));
        let mut state = AdamState::new(&store);

        // zero gradient leaves the parameter untouched
        adam_step(&mut store, &[Tensor::scalar(0.0)], &mut state, 0.1, &cfg).unwrap();
        assert_eq!(store.params().next().unwrap().1.item(), 1.0);

        // unit gradient with bias correction moves by almost exactly lr
        let mut store = ParamStore::<f64>::new();
        store.add_param("p".into(), Tensor::scalar(1.0));
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &[Tensor::scalar(1.0)], &mut state, 0.1, &cfg).unwrap();
        let p = store.params().next().unwrap().1.item();
        assert!((p - 0.9).abs() < 1e-7, "{p}");
        assert_eq!(state.step, 1);

        // lr = 0 is a bitwise no-op
        let before = store.params().next().unwrap().1.clone();
        adam_step(&mut store, &[Tensor::scalar(0.7)], &mut state, 0.0, &cfg).unwrap();
        assert_eq!(store.params().next().unwrap().1, &before);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let cfg = TrainConfig::default();
        let mut store = ParamStore::<f64>::new();
        store.add_param("p".into(), Tensor::zeros(&[3]));
        let mut state = AdamState::new(&store);
        assert!(adam_step(&mut store, &[Tensor::zeros(&[4])], &mut state, 0.1, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig { patience: 200, epochs: 100, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
