//! Deterministic mini-batch Adam training with best-validation-F1 checkpointing.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use satdet_nn::{Adam, AdamConfig, Grads, Tensor};
use serde::{Deserialize, Serialize};

use super::infer::{flatten_heads, postprocess, preprocess, unflatten_heads};
use super::loss::{assign_targets, ssd_loss, AnchorTargets};
use super::model::{DetectorModel, ModelSpec};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::metrics::evaluate;
use crate::geometry::BoundingBox;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub neg_pos_ratio: f64,
    pub iou_pos_threshold: f64,
    pub iou_neg_threshold: f64,
    /// Validation scoring settings used to pick the best epoch.
    pub confidence_threshold: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
    /// Stop after this many epochs without a validation F1 improvement.
    pub patience: Option<usize>,
    /// Each epoch shifts every training input by a random integer offset in
    /// `[-shift_jitter_px, shift_jitter_px]` on both axes (network-input pixels).
    pub shift_jitter_px: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 2e-3,
            seed: 0,
            neg_pos_ratio: 3.0,
            iou_pos_threshold: 0.5,
            iou_neg_threshold: 0.4,
            confidence_threshold: 0.25,
            nms_iou: 0.45,
            match_iou: 0.3,
            patience: None,
            shift_jitter_px: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("train config: {m}")));
        if self.epochs == 0 || self.batch_size == 0 {
            return err("epochs and batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return err("learning_rate must be positive");
        }
        if !(self.neg_pos_ratio.is_finite() && self.neg_pos_ratio >= 0.0) {
            return err("neg_pos_ratio must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.iou_neg_threshold)
            || !(0.0..=1.0).contains(&self.iou_pos_threshold)
            || self.iou_neg_threshold > self.iou_pos_threshold
        {
            return err("need 0 <= iou_neg_threshold <= iou_pos_threshold <= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the highest validation F1.
    pub model: DetectorModel,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

struct Prepared {
    input: Tensor,
    /// Ground truth in network-input pixels.
    gts: Vec<BoundingBox>,
    targets: AnchorTargets,
}

/// Translate a `[1, 1, h, w]` input by `(dx, dy)`, filling with zero (the
/// standardized background level). Boxes move with it; a box whose center
/// leaves the frame is dropped, the rest are clipped.
fn shift_sample(x: &Tensor, gts: &[BoundingBox], dx: i64, dy: i64) -> (Tensor, Vec<BoundingBox>) {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let mut out = vec![0.0; h * w];
    let src = x.data();
    for y in 0..h as i64 {
        let sy = y - dy;
        if sy < 0 || sy >= h as i64 {
            continue;
        }
        let (x0, x1) = (dx.max(0), (w as i64 + dx).min(w as i64));
        if x0 >= x1 {
            continue;
        }
        let row = &src[sy as usize * w..(sy as usize + 1) * w];
        out[y as usize * w + x0 as usize..y as usize * w + x1 as usize]
            .copy_from_slice(&row[(x0 - dx) as usize..(x1 - dx) as usize]);
    }
    let boxes = gts
        .iter()
        .filter_map(|b| {
            let m = BoundingBox {
                x_min: b.x_min + dx as f64,
                y_min: b.y_min + dy as f64,
                x_max: b.x_max + dx as f64,
                y_max: b.y_max + dy as f64,
            };
            let (cx, cy) = m.center();
            let inside = cx > 0.0 && cy > 0.0 && cx < w as f64 && cy < h as f64;
            let c = m.clamp_to(w, h);
            (inside && c.is_valid()).then_some(c)
        })
        .collect();
    (Tensor::new(s.to_vec(), out).expect("same shape"), boxes)
}

fn scaled_boxes(
    boxes: &[BoundingBox],
    frame: (usize, usize),
    input: (usize, usize),
) -> Vec<BoundingBox> {
    let sx = input.1 as f64 / frame.0 as f64;
    let sy = input.0 as f64 / frame.1 as f64;
    boxes.iter().map(|b| b.scale(sx, sy)).collect()
}

/// Loss and parameter gradients of a single image, accumulated into `grads`.
pub fn image_step(
    model: &DetectorModel,
    input: Tensor,
    targets: &AnchorTargets,
    neg_pos_ratio: f64,
    grads: &mut Grads,
) -> Result<f64> {
    let a = model.spec.anchor_config.anchors_per_cell();
    let (outs, tape) = model.forward_train(input)?;
    let shapes: Vec<Vec<usize>> = outs.iter().map(|t| t.shape().to_vec()).collect();
    let preds = flatten_heads(&outs, a)?;
    let loss = ssd_loss(&preds, targets, neg_pos_ratio);
    let head_grads = unflatten_heads(&loss.grad, &shapes, a)?;
    model.backward(tape, head_grads, grads)?;
    Ok(loss.total)
}

/// Validation precision/recall/F1 of `model` on `ds`.
pub fn validate_model(
    model: &DetectorModel,
    inputs: &[Tensor],
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(f64, f64, f64)> {
    let mut dets = Vec::with_capacity(inputs.len());
    for (x, f) in inputs.iter().zip(ds.frames()) {
        let outs = model.forward(x.clone())?;
        dets.push(postprocess(
            &outs,
            &model.decode_context((f.width(), f.height())),
            cfg.confidence_threshold,
            cfg.nms_iou,
        )?);
    }
    let gts: Vec<Vec<BoundingBox>> = ds.frames().map(|f| f.boxes.clone()).collect();
    let r = evaluate(&dets, &gts, cfg.match_iou, cfg.confidence_threshold);
    Ok((r.precision, r.recall, r.f1))
}

/// Train from scratch. Same data, spec and config give the same epoch log and weights.
pub fn train(
    train_set: &Dataset,
    val_set: &Dataset,
    spec: ModelSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let mode = train_set.tracking_mode()?;
    if val_set.tracking_mode()? != mode || spec.tracking_mode != mode {
        return Err(Error::Data(format!(
            "one tracking mode per run: train set is {mode}, validation set is {}, model is {}",
            val_set.tracking_mode()?,
            spec.tracking_mode
        )));
    }
    let mut model = DetectorModel::new(spec, cfg.seed)?;
    let input = model.spec.input_size;
    let prepared: Vec<Prepared> = train_set
        .frames()
        .map(|f| {
            let gts = scaled_boxes(&f.boxes, (f.width(), f.height()), input);
            Ok(Prepared {
                input: preprocess(&f.pixels, input),
                targets: assign_targets(
                    &gts,
                    model.anchors(),
                    cfg.iou_pos_threshold,
                    cfg.iou_neg_threshold,
                )?,
                gts,
            })
        })
        .collect::<Result<_>>()?;
    let val_inputs: Vec<Tensor> = val_set
        .frames()
        .map(|f| preprocess(&f.pixels, input))
        .collect();

    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    jitter_rng.set_stream(2);
    let j = cfg.shift_jitter_px as i64;
    let mut best: Option<(f64, usize, satdet_nn::ParamSet)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Grads::zeros_like(&model.params);
            for &i in batch {
                let p = &prepared[i];
                let dx = jitter_rng.random_range(-j..=j);
                let dy = jitter_rng.random_range(-j..=j);
                total += if (dx, dy) == (0, 0) {
                    image_step(
                        &model,
                        p.input.clone(),
                        &p.targets,
                        cfg.neg_pos_ratio,
                        &mut grads,
                    )?
                } else {
                    let (x, gts) = shift_sample(&p.input, &p.gts, dx, dy);
                    let t = assign_targets(
                        &gts,
                        model.anchors(),
                        cfg.iou_pos_threshold,
                        cfg.iou_neg_threshold,
                    )?;
                    image_step(&model, x, &t, cfg.neg_pos_ratio, &mut grads)?
                };
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut model.params, &grads)?;
        }
        let train_loss = total / prepared.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Internal(format!(
                "training loss diverged at epoch {epoch}"
            )));
        }
        let (p, r, f1) = validate_model(&model, &val_inputs, val_set, cfg)?;
        log::info!("epoch {epoch:3}  loss {train_loss:.4}  val P {p:.4} R {r:.4} F1 {f1:.4}");
        log.push(EpochLog {
            epoch,
            train_loss,
            val_precision: p,
            val_recall: r,
            val_f1: f1,
        });
        if best.as_ref().is_none_or(|b| f1 > b.0) {
            best = Some((f1, epoch, model.params.clone()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if cfg.patience.is_some_and(|p| epoch - best_epoch >= p) {
            log::info!(
                "no validation improvement for {} epochs; stopping",
                epoch - best_epoch
            );
            break;
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(TrainOutcome {
        model,
        best_epoch,
        log,
    })
}
