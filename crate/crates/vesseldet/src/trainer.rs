//! The optimization loop: batching, loss, SGD with momentum, optional
//! gradient accumulation, per-epoch validation with a confidence-threshold
//! sweep, and best-F2 checkpointing.
//!
//! Runs are deterministic given the seed: per-sample gradients are computed
//! independently (in parallel) and reduced in index order, and every random
//! stream derives from `(seed, epoch, index)`.

use std::collections::BTreeMap;

use ndarray::{Array4, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assign::{assign_targets, total_loss_with_grad, NeighborMode};
use crate::data::{
    image_to_tensor, letterbox_image, mosaic_augment, AnnotationRecord, DataError,
    LetterboxTransform,
};
use crate::geometry::{BBox, Detection, IouVariant};
use crate::metrics::{evaluate_dataset, EvalReport};
use crate::model::{CheckpointMeta, Model, ModelConfig, ModelError};
use crate::nn::{Mode, NormStats, Op, OpGrads, ParamGrads};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("validation split is empty")]
    EmptyValidation,
    #[error("non-finite loss at update {update} (batch images: {images:?})")]
    NonFiniteLoss { update: usize, images: Vec<String> },
}

fn default_conf_sweep() -> Vec<f64> {
    (1..=18).map(|i| i as f64 * 0.05).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
    /// 0, 2 or 4 neighboring cells per ground truth.
    pub neighbor_mode: u8,
    pub iou_variant: IouVariant,
    pub input_size: usize,
    pub mosaic: bool,
    pub seed: u64,
    pub eval_conf_sweep: Vec<f64>,
    pub val_nms_iou: f64,
    pub val_iou_thresh: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 4,
            accumulation_steps: 1,
            learning_rate: 0.01,
            weight_decay: 5e-4,
            momentum: 0.9,
            warmup_epochs: 3,
            neighbor_mode: 0,
            iou_variant: IouVariant::Giou,
            input_size: 2048,
            mosaic: false,
            seed: 0,
            eval_conf_sweep: default_conf_sweep(),
            val_nms_iou: 0.45,
            val_iou_thresh: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn neighbor(&self) -> Result<NeighborMode, TrainError> {
        NeighborMode::from_count(self.neighbor_mode)
            .map_err(|e| TrainError::Model(ModelError::Config(e)))
    }
}

/// A training/validation sample after letterboxing to the model input.
#[derive(Debug, Clone)]
pub struct Sample {
    pub stem: String,
    pub image: image::RgbImage,
    /// ground truth in pixel space of the letterboxed input
    pub boxes: Vec<BBox>,
    pub transform: LetterboxTransform,
}

/// Load and letterbox every record to `input_size`.
pub fn prepare_samples(
    records: &[AnnotationRecord],
    input_size: usize,
) -> Result<Vec<Sample>, TrainError> {
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let img = image::open(&rec.image_path)
            .map_err(|e| DataError::Image {
                path: rec.image_path.clone(),
                msg: e.to_string(),
            })?
            .to_rgb8();
        let (boxed, tf) = letterbox_image(&img, input_size as u32);
        let boxes = rec.boxes.iter().map(|b| tf.box_to_input(b)).collect();
        out.push(Sample {
            stem: rec.stem.clone(),
            image: boxed,
            boxes,
            transform: tf,
        });
    }
    Ok(out)
}

/// Largest box extent over the training set, with a 10% safety margin and
/// capped at 1.0. Used when the config leaves the maximum size automatic.
pub fn derive_max_fracs(samples: &[Sample], input_size: usize) -> (f64, f64) {
    let mut max_w = 0.0f64;
    let mut max_h = 0.0f64;
    for s in samples {
        for b in &s.boxes {
            max_w = max_w.max(b.w / input_size as f64);
            max_h = max_h.max(b.h / input_size as f64);
        }
    }
    if max_w <= 0.0 || max_h <= 0.0 {
        (1.0, 1.0)
    } else {
        ((1.1 * max_w).min(1.0), (1.1 * max_h).min(1.0))
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STATS_MOMENTUM: f32 = 0.1;

pub struct StepStats {
    pub mean_loss: f64,
    pub lr: f64,
}

/// Owns the model and optimizer state between updates.
pub struct TrainState {
    pub model: Model,
    pub cfg: TrainConfig,
    velocity: ParamGrads,
    pub update_index: usize,
    pub total_updates: usize,
}

impl TrainState {
    pub fn new(model: Model, cfg: TrainConfig, total_updates: usize) -> Self {
        let velocity = ParamGrads::zeros_like(&model.graph);
        Self {
            model,
            cfg,
            velocity,
            update_index: 0,
            total_updates,
        }
    }

    /// Linear warmup into cosine decay toward 1% of the peak rate.
    pub fn lr_at(&self, update: usize) -> f64 {
        let steps_per_epoch =
            (self.total_updates / self.cfg.epochs.max(1)).max(1);
        let warm = (self.cfg.warmup_epochs * steps_per_epoch).min(self.total_updates.saturating_sub(1));
        let lr_max = self.cfg.learning_rate;
        if update < warm {
            return lr_max * (update + 1) as f64 / warm as f64;
        }
        let lr_min = 0.01 * lr_max;
        let span = (self.total_updates - warm).max(1);
        let progress = (update - warm) as f64 / span as f64;
        lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// Forward + loss + backward for one sample. Returns the per-image loss,
    /// parameter gradients and observed normalization statistics.
    fn sample_gradients(&self, sample: &Sample) -> (f64, ParamGrads, NormStats) {
        let model = &self.model;
        let x3 = image_to_tensor(&sample.image);
        let x = x3.insert_axis(Axis(0));
        let fwd = model.graph.forward(&x, Mode::Train);
        let raws = model
            .raw_grids_for_sample(&fwd, 0)
            .expect("train-mode forward has matching shapes");
        let neighbor = NeighborMode::from_count(self.cfg.neighbor_mode)
            .expect("validated at config time");
        let asg = assign_targets(&sample.boxes, &model.cfg, neighbor);
        let (loss, raw_grads) =
            total_loss_with_grad(&raws, &model.cfg, &asg, self.cfg.iou_variant);

        let mut out_grads = Vec::with_capacity(3);
        for g in &raw_grads {
            let (gh, gw, _) = g.dim();
            let mut t = Array4::<f32>::zeros((1, 5, gh, gw));
            for ch in 0..5 {
                for r in 0..gh {
                    for c in 0..gw {
                        t[(0, ch, r, c)] = g[(r, c, ch)] as f32;
                    }
                }
            }
            out_grads.push(t);
        }
        let pgrads = model.graph.backward(&fwd, out_grads);
        let stats = fwd.norm_stats(&model.graph);
        (loss, pgrads, stats)
    }

    /// One optimizer update over `micro_batches` (gradient accumulation).
    /// The gradient is the mean per-image gradient of the effective batch,
    /// independent of how it is factored into micro-batches.
    pub fn run_update(&mut self, micro_batches: &[&[Sample]]) -> Result<StepStats, TrainError> {
        assert!(!micro_batches.is_empty());
        let mut accum: Option<ParamGrads> = None;
        let mut loss_sum = 0.0;
        let mut n_samples = 0usize;
        let mut all_stats: Vec<NormStats> = Vec::new();

        for micro in micro_batches {
            let results: Vec<_> = micro
                .par_iter()
                .map(|s| self.sample_gradients(s))
                .collect();
            let mut micro_grad: Option<ParamGrads> = None;
            for (loss, pg, stats) in results {
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        update: self.update_index,
                        images: micro.iter().map(|s| s.stem.clone()).collect(),
                    });
                }
                loss_sum += loss;
                n_samples += 1;
                match &mut micro_grad {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
                all_stats.push(stats);
            }
            let mut micro_grad = micro_grad.expect("non-empty micro batch");
            micro_grad.scale(1.0 / micro.len() as f32);
            match &mut accum {
                Some(acc) => acc.add_assign(&micro_grad),
                slot @ None => *slot = Some(micro_grad),
            }
        }
        let mut grad = accum.expect("non-empty update");
        grad.scale(1.0 / micro_batches.len() as f32);

        let lr = self.lr_at(self.update_index);
        self.apply_sgd(&grad, lr);
        self.update_running_stats(&all_stats);
        self.update_index += 1;
        Ok(StepStats {
            mean_loss: loss_sum / n_samples as f64,
            lr,
        })
    }

    /// Classic SGD: momentum on the L2-regularized gradient. Weight decay
    /// applies to convolution weights only, not biases or norm affines.
    fn apply_sgd(&mut self, grads: &ParamGrads, lr: f64) {
        let lr = lr as f32;
        let mu = self.cfg.momentum as f32;
        let wd = self.cfg.weight_decay as f32;
        for ((node, v), g) in self
            .model
            .graph
            .nodes
            .iter_mut()
            .zip(self.velocity.by_node.iter_mut())
            .zip(grads.by_node.iter())
        {
            match (&mut node.op, v, g) {
                (
                    Op::Conv(c),
                    Some(OpGrads::Conv { dw: vw, db: vb }),
                    Some(OpGrads::Conv { dw: gw, db: gb }),
                ) => {
                    ndarray::Zip::from(&mut c.weight)
                        .and(vw)
                        .and(gw)
                        .for_each(|w, v, &g| {
                            *v = mu * *v + (g + wd * *w);
                            *w -= lr * *v;
                        });
                    if let (Some(b), Some(vb), Some(gb)) = (&mut c.bias, vb, gb) {
                        ndarray::Zip::from(b).and(vb).and(gb).for_each(|w, v, &g| {
                            *v = mu * *v + g;
                            *w -= lr * *v;
                        });
                    }
                }
                (
                    Op::Norm(n),
                    Some(OpGrads::Norm {
                        dgamma: vg,
                        dbeta: vb,
                    }),
                    Some(OpGrads::Norm {
                        dgamma: gg,
                        dbeta: gb,
                    }),
                ) => {
                    ndarray::Zip::from(&mut n.gamma).and(vg).and(gg).for_each(
                        |w, v, &g| {
                            *v = mu * *v + g;
                            *w -= lr * *v;
                        },
                    );
                    ndarray::Zip::from(&mut n.beta).and(vb).and(gb).for_each(|w, v, &g| {
                        *v = mu * *v + g;
                        *w -= lr * *v;
                    });
                }
                (_, None, None) => {}
                _ => unreachable!("parameter layouts align"),
            }
        }
    }

    /// Average per-sample statistics across the effective batch (in index
    /// order) and fold them into the running estimates.
    fn update_running_stats(&mut self, all_stats: &[NormStats]) {
        if all_stats.is_empty() {
            return;
        }
        let n = all_stats.len() as f32;
        let mut averaged: NormStats = all_stats[0].clone();
        for stats in &all_stats[1..] {
            for (acc, s) in averaged.iter_mut().zip(stats) {
                if let (Some((am, av)), Some((m, v))) = (acc.as_mut(), s.as_ref()) {
                    *am += m;
                    *av += v;
                }
            }
        }
        for slot in averaged.iter_mut().flatten() {
            slot.0.mapv_inplace(|v| v / n);
            slot.1.mapv_inplace(|v| v / n);
        }
        self.model
            .graph
            .update_running_stats(&averaged, STATS_MOMENTUM);
    }
}

/// Eval-mode predictions for a set of samples, keyed by stem. Boxes are
/// clipped to the input bounds, matching what prediction files contain.
pub fn predictions_for_samples(
    model: &Model,
    samples: &[Sample],
    conf_thresh: f64,
    nms_iou: f64,
) -> BTreeMap<String, Vec<Detection>> {
    let input = model.cfg.input_w as f64;
    let per_image: Vec<(String, Vec<Detection>)> = samples
        .par_iter()
        .map(|s| {
            let x = image_to_tensor(&s.image).insert_axis(Axis(0));
            let dets = model
                .predict(&x, conf_thresh, nms_iou)
                .expect("sample shapes match the model")
                .into_iter()
                .map(|d| {
                    let (x1, y1, x2, y2) = d.bbox.corners();
                    Detection {
                        bbox: BBox::from_corners(
                            x1.clamp(0.0, input),
                            y1.clamp(0.0, input),
                            x2.clamp(0.0, input),
                            y2.clamp(0.0, input),
                            crate::geometry::Space::Pixel,
                        ),
                        confidence: d.confidence,
                    }
                })
                .collect();
            (s.stem.clone(), dets)
        })
        .collect();
    per_image.into_iter().collect()
}

/// Sweep the confidence thresholds and report at the F2-maximizing one.
/// Ties resolve to the lowest threshold.
pub fn validate(
    model: &Model,
    samples: &[Sample],
    iou_thresh: f64,
    conf_sweep: &[f64],
    nms_iou: f64,
) -> Result<(EvalReport, f64), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    assert!(!conf_sweep.is_empty(), "confidence sweep must be non-empty");
    let mut sweep: Vec<f64> = conf_sweep.to_vec();
    sweep.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let floor = sweep[0];
    let preds = predictions_for_samples(model, samples, floor, nms_iou);
    let annos: BTreeMap<String, Vec<BBox>> = samples
        .iter()
        .map(|s| (s.stem.clone(), s.boxes.clone()))
        .collect();
    let mut best: Option<(EvalReport, f64)> = None;
    for &t in &sweep {
        let report = evaluate_dataset(&preds, &annos, iou_thresh, t);
        let better = match &best {
            None => true,
            Some((b, _)) => report.f2 > b.f2,
        };
        if better {
            best = Some((report, t));
        }
    }
    Ok(best.expect("non-empty sweep"))
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub f2: f64,
    pub best_conf: f64,
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        format!(
            "epoch = {} mean_loss = {:.6} val_precision = {:.4} val_recall = {:.4} val_f2 = {:.4} best_conf = {:.2}",
            self.epoch, self.mean_loss, self.precision, self.recall, self.f2, self.best_conf
        )
    }
}

pub struct TrainOutcome {
    /// Best-validation-F2 snapshot.
    pub model: Model,
    pub meta: CheckpointMeta,
    pub log: Vec<EpochLog>,
}

/// Full training run over pre-split records.
pub fn train(
    mut model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_records: &[AnnotationRecord],
    val_records: &[AnnotationRecord],
) -> Result<TrainOutcome, TrainError> {
    if train_records.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    if val_records.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    train_cfg.neighbor()?;
    let train_samples = prepare_samples(train_records, train_cfg.input_size)?;
    let val_samples = prepare_samples(val_records, train_cfg.input_size)?;

    model_cfg.input_h = train_cfg.input_size;
    model_cfg.input_w = train_cfg.input_size;
    if model_cfg.max_w_frac <= 0.0 || model_cfg.max_h_frac <= 0.0 {
        let (mw, mh) = derive_max_fracs(&train_samples, train_cfg.input_size);
        log::info!("derived max box fractions from data: {mw:.3} x {mh:.3}");
        model_cfg.max_w_frac = mw;
        model_cfg.max_h_frac = mh;
    }
    let model = Model::new(model_cfg, train_cfg.seed)?;

    let effective_batch = train_cfg.batch_size * train_cfg.accumulation_steps;
    let steps_per_epoch = train_samples.len().div_ceil(effective_batch);
    let total_updates = steps_per_epoch * train_cfg.epochs;
    let seed = train_cfg.seed;
    let mosaic_on = train_cfg.mosaic;
    let batch_size = train_cfg.batch_size;
    let epochs = train_cfg.epochs;
    let sweep = train_cfg.eval_conf_sweep.clone();
    let (val_iou, val_nms) = (train_cfg.val_iou_thresh, train_cfg.val_nms_iou);
    let mut state = TrainState::new(model, train_cfg, total_updates);

    let mut log_lines = Vec::with_capacity(epochs);
    let mut best: Option<(Model, CheckpointMeta)> = None;

    for epoch in 0..epochs {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng =
            rand_chacha::ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (epoch as u64)));
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_samples = 0usize;
        for chunk in order.chunks(effective_batch) {
            // materialize the batch, applying mosaic when enabled
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    if mosaic_on {
                        let mut pick =
                            || train_samples[rng.gen_range(0..train_samples.len())].clone();
                        let (a, b, c) = (pick(), pick(), pick());
                        let base = &train_samples[i];
                        let refs = [
                            (&base.image, base.boxes.as_slice()),
                            (&a.image, a.boxes.as_slice()),
                            (&b.image, b.boxes.as_slice()),
                            (&c.image, c.boxes.as_slice()),
                        ];
                        let (img, boxes) = mosaic_augment(refs, &mut rng);
                        Sample {
                            stem: base.stem.clone(),
                            image: img,
                            boxes,
                            transform: base.transform,
                        }
                    } else {
                        train_samples[i].clone()
                    }
                })
                .collect();
            let micros: Vec<&[Sample]> = batch.chunks(batch_size).collect();
            let stats = state.run_update(&micros)?;
            epoch_loss += stats.mean_loss * batch.len() as f64;
            epoch_samples += batch.len();
        }

        let (report, best_conf) =
            validate(&state.model, &val_samples, val_iou, &sweep, val_nms)?;
        let entry = EpochLog {
            epoch,
            mean_loss: epoch_loss / epoch_samples as f64,
            precision: report.precision,
            recall: report.recall,
            f2: report.f2,
            best_conf,
        };
        log::info!("{}", entry.to_line());
        let improved = best
            .as_ref()
            .map_or(true, |(_, meta)| report.f2 > meta.best_f2);
        if improved {
            best = Some((
                state.model.clone(),
                CheckpointMeta {
                    epoch,
                    best_f2: report.f2,
                    best_conf_thresh: best_conf,
                    train_config: serde_json::to_value(&state.cfg).ok(),
                },
            ));
        }
        log_lines.push(entry);
    }

    let (model, meta) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        meta,
        log: log_lines,
    })
}
