//! Two-phase schedule: separate pretraining of detector and segmenter, then
//! joint training of both plus the joint classification head.

use std::collections::BTreeMap;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::info;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collab::CosamModel;
use crate::config::TrainConfig;
use crate::dataset::{Dataset, SliceRef, TrainingSample};
use crate::detector::{select_detections, Detection};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::segmenter::Segmenter;
use crate::training::augment::Augmentation;
use crate::training::losses::{
    detection_loss, joint_classification_loss, joint_target, segmentation_loss,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Detector,
    Segmenter,
    Joint,
}

impl Phase {
    fn salt(self) -> u64 {
        match self {
            Phase::Detector => 0x0de7,
            Phase::Segmenter => 0x05e6,
            Phase::Joint => 0x0101,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss_total: f64,
    #[serde(flatten)]
    pub components: BTreeMap<String, f64>,
    pub lr: BTreeMap<String, f64>,
    /// Per-step total losses of the epoch.
    pub step_losses: Vec<f64>,
}

/// Slices visited when fitting the joint head's input statistics.
const JOINT_STATS_SLICES: usize = 256;

/// Standardizes the joint head's inputs with statistics of the candidates it
/// will score, taken from the starting model over evenly spaced training
/// slices. Leaves the identity in place if no slice yields a candidate.
fn fit_joint_stats(model: &CosamModel, data: &Dataset, limit: usize) -> Result<()> {
    let inf = &model.config.inference;
    let window_size = model.config.detector.window_size;
    let refs = data.slice_refs();
    let step = refs.len().div_ceil(JOINT_STATS_SLICES).max(1);
    let mut rows = Vec::new();
    for r in refs.iter().step_by(step) {
        let window = data.window(*r, window_size)?;
        let out = model.detector.forward(&window)?;
        let mut dets = select_detections(&out.detection_set()?, inf.conf_threshold, inf.nms_iou);
        dets.truncate(limit);
        if dets.is_empty() {
            continue;
        }
        let partials = model.segmenter.segment_candidates(
            window.anchor(),
            &dets
                .iter()
                .map(|d| (d.bbox, d.query_index))
                .collect::<Vec<_>>(),
        )?;
        let features = model.routed_features(&out, dets.iter().map(|d| d.query_index))?;
        for (i, p) in partials.iter().enumerate() {
            rows.push(Tensor::cat(&[&p.token, &features.get(i)?], 0)?.detach());
        }
    }
    if rows.is_empty() {
        return Ok(());
    }
    model.fit_joint_input_stats(&Tensor::stack(&rows, 0)?)
}

/// The joint head is fitted on the detections inference would hand it.
/// Lower-ranked candidates still prompt the segmenter, which learns to return
/// empty masks for them.
fn scored_by_joint_head(candidates: &[Detection], conf_threshold: f32) -> Vec<usize> {
    (0..candidates.len())
        .filter(|&i| candidates[i].confidence >= conf_threshold)
        .collect()
}

#[derive(Default)]
struct Accum {
    sums: BTreeMap<String, f64>,
    count: usize,
}

impl Accum {
    fn add(&mut self, key: &str, v: f64) {
        *self.sums.entry(key.to_string()).or_default() += v;
    }

    fn mean(&self) -> BTreeMap<String, f64> {
        let n = self.count.max(1) as f64;
        self.sums.iter().map(|(k, v)| (k.clone(), v / n)).collect()
    }
}

fn optimizer(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: 1e-4,
            ..Default::default()
        },
    )?)
}

/// Slices visited in one epoch: every slice with foreground plus a seeded
/// `negative_fraction` share of the empty ones, shuffled.
fn epoch_plan(
    refs: &[SliceRef],
    negative_fraction: f64,
    positives_only: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<SliceRef> {
    let mut plan: Vec<SliceRef> = refs
        .iter()
        .copied()
        .filter(|r| r.has_foreground || (!positives_only && rng.random_bool(negative_fraction)))
        .collect();
    plan.shuffle(rng);
    plan
}

/// Random box prompt around `b`: each edge moves by up to `jitter` of the
/// box extent, result clipped to the image and kept non-degenerate.
pub fn jitter_box(b: &BBox, jitter: f32, extents: (usize, usize), rng: &mut impl Rng) -> BBox {
    let (h, w) = (extents.0 as f32, extents.1 as f32);
    if jitter <= 0.0 {
        return *b;
    }
    let jx = jitter * b.width();
    let jy = jitter * b.height();
    let mut d = |s: f32| {
        if s > 0.0 {
            rng.random_range(-s..=s)
        } else {
            0.0
        }
    };
    BBox::new(b.x1 + d(jx), b.y1 + d(jy), b.x2 + d(jx), b.y2 + d(jy))
        .canonical()
        .clip(w, h, 1.0)
}

/// Label pixels inside `b`.
pub fn label_inside(label: &Array2<u8>, b: &BBox) -> Array2<u8> {
    let (h, w) = label.dim();
    let (r0, r1, c0, c1) = b.pixel_range(w, h);
    Array2::from_shape_fn((h, w), |(r, c)| {
        if r >= r0 && r < r1 && c >= c0 && c < c1 {
            label[[r, c]]
        } else {
            0
        }
    })
}

fn stack_masks(masks: &[Array2<u8>], device: &candle_core::Device) -> Result<Tensor> {
    let (h, w) = masks[0].dim();
    let data: Vec<f32> = masks
        .iter()
        .flat_map(|m| m.iter().map(|&v| f32::from(v)))
        .collect();
    Ok(Tensor::from_vec(data, (masks.len(), h, w), device)?)
}

/// Teacher prompts: jittered GT boxes with their component masks.
fn teacher_prompts(
    sample: &TrainingSample,
    jitter: f32,
    rng: &mut ChaCha8Rng,
) -> Vec<(BBox, Array2<u8>)> {
    let ext = sample.anchor_label.dim();
    sample
        .components
        .iter()
        .map(|(b, m)| (jitter_box(b, jitter, ext, rng), m.clone()))
        .collect()
}

fn segment_loss_for(
    seg: &Segmenter,
    image: &Array2<f32>,
    prompts: &[BBox],
    targets: &[Array2<u8>],
    cfg: &TrainConfig,
) -> Result<(
    crate::training::losses::SegmentationLoss,
    crate::segmenter::MaskBatch,
)> {
    let emb = seg.encode_image(image)?;
    let p = prompts
        .iter()
        .map(|b| seg.encode_prompt(b, image.dim()))
        .collect::<Result<Vec<_>>>()?;
    let batch = seg.decode_masks(&emb, &p)?;
    let gt = stack_masks(targets, batch.logits.device())?;
    Ok((
        segmentation_loss(&batch.logits, &gt, &cfg.loss_weights)?,
        batch,
    ))
}

/// Drives one phase: builds samples, accumulates `batch_size` losses per
/// optimizer step and reports per-epoch means.
fn run_phase<F>(
    phase: Phase,
    epochs: usize,
    cfg: &TrainConfig,
    data: &Dataset,
    window_size: usize,
    positives_only: bool,
    mut optimizers: Vec<(String, AdamW)>,
    mut step: F,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>>
where
    F: FnMut(&TrainingSample, &mut ChaCha8Rng, &mut Accum) -> Result<Option<Tensor>>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let refs = data.slice_refs();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ phase.salt());
    let lr: BTreeMap<String, f64> = optimizers
        .iter()
        .map(|(k, o)| (k.clone(), o.learning_rate()))
        .collect();
    let mut records = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let plan = epoch_plan(&refs, cfg.negative_fraction, positives_only, &mut rng);
        if plan.is_empty() {
            return Err(Error::Dataset("no training slices selected".into()));
        }
        let mut acc = Accum::default();
        let mut step_losses = Vec::new();
        for batch in plan.chunks(cfg.batch_size) {
            let mut losses = Vec::with_capacity(batch.len());
            for r in batch {
                let aug_seed = rng.next_u64();
                let extents = data.volumes[r.volume].volume.extents();
                let aug = Augmentation::sample(&cfg.augment, (extents.1, extents.2), aug_seed)?;
                let sample = data.sample(*r, window_size, &aug)?;
                if let Some(loss) = step(&sample, &mut rng, &mut acc)? {
                    losses.push(loss);
                }
            }
            if losses.is_empty() {
                continue;
            }
            let n = losses.len();
            let total = (Tensor::stack(&losses, 0)?.sum_all()? / n as f64)?;
            let value = f64::from(total.to_scalar::<f32>()?);
            if !value.is_finite() {
                return Err(Error::Dataset(format!(
                    "non-finite {phase:?} loss at epoch {epoch}"
                )));
            }
            let grads = total.backward()?;
            for (_, opt) in optimizers.iter_mut() {
                opt.step(&grads)?;
            }
            step_losses.push(value);
            acc.add("loss_total", value * n as f64);
            acc.count += n;
        }
        let mut components = acc.mean();
        let loss_total = components.remove("loss_total").unwrap_or(0.0);
        let record = EpochRecord {
            epoch,
            phase,
            loss_total,
            components,
            lr: lr.clone(),
            step_losses,
        };
        info!("{phase:?} epoch {epoch}: loss {loss_total:.5}");
        on_epoch(&record);
        records.push(record);
    }
    Ok(records)
}

/// Trains the detector alone on anchor-slice ground truth.
pub fn pretrain_detector(
    model: &CosamModel,
    cfg: &TrainConfig,
    data: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    let det = &model.detector;
    let dcfg = det.config().clone();
    let opt = optimizer(model.params.vars_with_prefix("det."), cfg.lr_detector)?;
    run_phase(
        Phase::Detector,
        cfg.pretrain_epochs_det,
        cfg,
        data,
        dcfg.window_size,
        false,
        vec![("detector".into(), opt)],
        |sample, _, acc| {
            let out = det.forward(&sample.window)?;
            let l = detection_loss(
                &out,
                &sample.target,
                sample.window.anchor_position(),
                dcfg.stride,
                &cfg.loss_weights,
            )?;
            acc.add("cls", l.cls.into());
            acc.add("bbox", l.bbox.into());
            acc.add("giou", l.giou.into());
            acc.add("proposal", l.proposal.into());
            Ok(Some(l.total))
        },
        on_epoch,
    )
}

/// Trains the segmenter alone with jittered ground-truth boxes as prompts.
/// Slices without foreground carry no prompt and are skipped.
pub fn pretrain_segmenter(
    model: &CosamModel,
    cfg: &TrainConfig,
    data: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    let seg = &model.segmenter;
    let opt = optimizer(model.params.vars_with_prefix("seg."), cfg.lr_segmenter)?;
    run_phase(
        Phase::Segmenter,
        cfg.pretrain_epochs_seg,
        cfg,
        data,
        1,
        true,
        vec![("segmenter".into(), opt)],
        |sample, rng, acc| {
            let prompts = teacher_prompts(sample, cfg.prompt_jitter, rng);
            if prompts.is_empty() {
                return Ok(None);
            }
            let boxes: Vec<BBox> = prompts.iter().map(|p| p.0).collect();
            let targets: Vec<Array2<u8>> = prompts.into_iter().map(|p| p.1).collect();
            let (l, _) = segment_loss_for(seg, sample.window.anchor(), &boxes, &targets, cfg)?;
            acc.add("mask_dice", l.dice.into());
            acc.add("mask_bce", l.bce.into());
            Ok(Some(l.total))
        },
        on_epoch,
    )
}

/// Joint training: detection loss + segmentation loss over teacher and
/// detector prompts + weighted joint classification loss. Box coordinates
/// are plain numbers on the way into the segmenter, so no gradient flows
/// through them; mask tokens and sequence features stay differentiable into
/// the joint head.
pub fn joint_train(
    model: &CosamModel,
    cfg: &TrainConfig,
    data: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    let det = &model.detector;
    let seg = &model.segmenter;
    let dcfg = det.config().clone();
    let nms_iou = model.config.inference.nms_iou;
    let conf_threshold = model.config.inference.conf_threshold;
    let mut optimizers = vec![
        (
            "detector".to_string(),
            optimizer(model.params.vars_with_prefix("det."), cfg.lr_detector)?,
        ),
        (
            "segmenter".to_string(),
            optimizer(model.params.vars_with_prefix("seg."), cfg.lr_segmenter)?,
        ),
    ];
    if cfg.use_joint_head && !data.is_empty() {
        fit_joint_stats(model, data, cfg.joint_candidates)?;
    }
    if cfg.use_joint_head {
        optimizers.push((
            "joint".to_string(),
            optimizer(model.params.vars_with_prefix("joint."), cfg.lr_joint)?,
        ));
    }
    run_phase(
        Phase::Joint,
        cfg.joint_epochs,
        cfg,
        data,
        dcfg.window_size,
        false,
        optimizers,
        |sample, rng, acc| {
            let anchor = sample.window.anchor();
            let out = det.forward(&sample.window)?;
            let dl = detection_loss(
                &out,
                &sample.target,
                sample.window.anchor_position(),
                dcfg.stride,
                &cfg.loss_weights,
            )?;
            acc.add("cls", dl.cls.into());
            acc.add("bbox", dl.bbox.into());
            acc.add("giou", dl.giou.into());
            acc.add("proposal", dl.proposal.into());

            let mut candidates = select_detections(&out.detection_set()?, 0.0, nms_iou);
            candidates.truncate(cfg.joint_candidates);
            let teacher = teacher_prompts(sample, cfg.prompt_jitter, rng);
            let n_teacher = teacher.len();
            let mut boxes: Vec<BBox> = teacher.iter().map(|p| p.0).collect();
            let mut targets: Vec<Array2<u8>> = teacher.into_iter().map(|p| p.1).collect();
            for c in &candidates {
                boxes.push(c.bbox);
                targets.push(label_inside(&sample.anchor_label, &c.bbox));
            }
            let mut total = dl.total;
            if !boxes.is_empty() {
                let (sl, batch) = segment_loss_for(seg, anchor, &boxes, &targets, cfg)?;
                acc.add("mask_dice", sl.dice.into());
                acc.add("mask_bce", sl.bce.into());
                total = (total + sl.total)?;
                let scored: Vec<(usize, f32)> = if cfg.use_joint_head {
                    scored_by_joint_head(&candidates, conf_threshold)
                        .into_iter()
                        .filter_map(|i| {
                            joint_target(&candidates[i].bbox, &sample.target.boxes).map(|y| (i, y))
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                if !scored.is_empty() {
                    let rows: Vec<u32> = scored
                        .iter()
                        .map(|&(i, _)| (n_teacher + i) as u32)
                        .collect();
                    let tokens = batch
                        .tokens
                        .contiguous()?
                        .index_select(&Tensor::new(rows.as_slice(), batch.tokens.device())?, 0)?;
                    let features = model.routed_features(
                        &out,
                        scored.iter().map(|&(i, _)| candidates[i].query_index),
                    )?;
                    let logits = model.joint.pair_logits(&tokens, &features)?;
                    let labels: Vec<f32> = scored.iter().map(|&(_, y)| y).collect();
                    let jl = joint_classification_loss(&logits, &labels)?;
                    acc.add("joint", f64::from(jl.to_scalar::<f32>()?));
                    total = (total + (jl * cfg.loss_weights.joint as f64)?)?;
                }
            }
            Ok(Some(total))
        },
        on_epoch,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_head_scores_confident_candidates() {
        let dets: Vec<Detection> = [0.9, 0.6, 0.3, 0.2]
            .iter()
            .enumerate()
            .map(|(i, &c)| Detection {
                bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
                confidence: c,
                query_index: i,
            })
            .collect();
        assert_eq!(scored_by_joint_head(&dets, 0.3), vec![0, 1, 2]);
        assert!(scored_by_joint_head(&dets, 0.95).is_empty());
    }

    #[test]
    fn jitter_keeps_valid_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let b = jitter_box(&BBox::new(0.0, 0.0, 2.0, 3.0), 0.5, (16, 16), &mut rng);
            assert!(b.is_valid() && b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 16.0 && b.y2 <= 16.0);
        }
        assert_eq!(
            jitter_box(&BBox::new(1.0, 1.0, 5.0, 5.0), 0.0, (8, 8), &mut rng),
            BBox::new(1.0, 1.0, 5.0, 5.0)
        );
    }

    #[test]
    fn label_inside_box() {
        let l = Array2::from_elem((4, 4), 1u8);
        let m = label_inside(&l, &BBox::new(1.0, 0.0, 3.0, 2.0));
        assert_eq!(m.sum(), 4);
        assert_eq!(m[[0, 1]], 1);
        assert_eq!(m[[2, 1]], 0);
    }
}
