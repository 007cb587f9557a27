//! Detection, proposal, segmentation and joint-classification losses.

use candle_core::{Tensor, D};

use crate::config::LossWeights;
use crate::detector::{DetectorOutput, Stage1Output};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::bce_with_logits;
use crate::training::matching::{match_queries, normalized_cxcywh, MatchResult};

/// Supervision for one window.
#[derive(Debug, Clone, Default)]
pub struct DetectionTarget {
    /// Anchor-slice ground truth, one box per 2-D component.
    pub boxes: Vec<BBox>,
    /// Per-frame boxes of every 3-D component visible on the anchor slice.
    pub tracks: Vec<Vec<Option<BBox>>>,
}

#[derive(Debug, Clone)]
pub struct DetectionLoss {
    pub total: Tensor,
    pub cls: f32,
    pub bbox: f32,
    pub giou: f32,
    pub proposal: f32,
    pub matching: MatchResult,
}

fn to_xyxy(b: &Tensor) -> Result<[Tensor; 4]> {
    let c = |i| b.narrow(1, i, 1).and_then(|t| t.squeeze(1));
    let (cx, cy, w, h) = (c(0)?, c(1)?, c(2)?, c(3)?);
    let hw = (&w * 0.5)?;
    let hh = (&h * 0.5)?;
    Ok([(&cx - &hw)?, (&cy - &hh)?, (&cx + &hw)?, (&cy + &hh)?])
}

/// Row-wise generalized IoU of `(K, 4)` center-size boxes.
pub fn giou_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [ax1, ay1, ax2, ay2] = to_xyxy(a)?;
    let [bx1, by1, bx2, by2] = to_xyxy(b)?;
    let area_a = ((&ax2 - &ax1)? * (&ay2 - &ay1)?)?;
    let area_b = ((&bx2 - &bx1)? * (&by2 - &by1)?)?;
    let iw = (ax2.minimum(&bx2)? - ax1.maximum(&bx1)?)?.relu()?;
    let ih = (ay2.minimum(&by2)? - ay1.maximum(&by1)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = ((area_a + area_b)? - &inter)?;
    let iou = inter.div(&(&union + 1e-7)?)?;
    let ew = (ax2.maximum(&bx2)? - ax1.minimum(&bx1)?)?;
    let eh = (ay2.maximum(&by2)? - ay1.minimum(&by1)?)?;
    let enclosing = ((ew * eh)? + 1e-7)?;
    Ok((iou - ((&enclosing - &union)?.div(&enclosing))?)?)
}

/// Set-prediction loss for a fixed matching. `boxes` are `(N_q, 4)`
/// image-relative center-size, `gt` the matching targets in the same
/// parameterization. Returns `(total, cls, l1, giou)`.
pub fn set_prediction_loss(
    boxes: &Tensor,
    conf_logits: &Tensor,
    gt: &[[f32; 4]],
    matching: &MatchResult,
    weights: &LossWeights,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let nq = boxes.dim(0)?;
    let device = boxes.device();
    let mut conf_target = vec![0f32; nq];
    for &(q, _) in &matching.pairs {
        conf_target[q] = 1.0;
    }
    let cls =
        bce_with_logits(conf_logits, &Tensor::from_vec(conf_target, nq, device)?)?.mean_all()?;
    let (l1, giou) = if matching.pairs.is_empty() {
        let z = Tensor::zeros((), candle_core::DType::F32, device)?;
        (z.clone(), z)
    } else {
        let qi: Vec<u32> = matching.pairs.iter().map(|&(q, _)| q as u32).collect();
        let tg: Vec<f32> = matching.pairs.iter().flat_map(|&(_, g)| gt[g]).collect();
        let n = qi.len();
        let pred = boxes.index_select(&Tensor::from_vec(qi, n, device)?, 0)?;
        let target = Tensor::from_vec(tg, (n, 4), device)?;
        let l1 = ((&pred - &target)?.abs()?.sum_all()? / n as f64)?;
        let giou = ((1.0 - giou_rows(&pred, &target)?)?.sum_all()? / n as f64)?;
        (l1, giou)
    };
    let total = ((&cls * weights.cls as f64)? + (&l1 * weights.bbox as f64)?)?
        .add(&(&giou * weights.giou as f64)?)?;
    Ok((total, cls, l1, giou))
}

/// Stage-1 loss: class-balanced objectness BCE plus per-frame L1 of the
/// positive columns against the component tracks.
///
/// A column is positive for a track if its cell center lies inside the
/// track's anchor box; a box covering no cell center claims the cell under
/// its own center.
pub fn proposal_loss(
    stage1: &Stage1Output,
    tracks: &[Vec<Option<BBox>>],
    anchor_position: usize,
    stride: usize,
    image_size: (usize, usize),
    weights: &LossWeights,
) -> Result<Tensor> {
    let (fh, fw) = stage1.grid;
    let g = fh * fw;
    let l = stage1.boxes.dim(1)?;
    let device = stage1.objectness.device();
    let s = stride as f32;
    let mut positive = vec![false; g];
    let mut box_target = vec![0f32; g * l * 4];
    let mut box_mask = vec![0f32; g * l * 4];
    let (h, w) = (image_size.0 as f32, image_size.1 as f32);
    for track in tracks {
        let Some(anchor) = track.get(anchor_position).copied().flatten() else {
            continue;
        };
        let mut cells: Vec<usize> = (0..g)
            .filter(|&i| {
                let (cx, cy) = (((i % fw) as f32 + 0.5) * s, ((i / fw) as f32 + 0.5) * s);
                cx >= anchor.x1 && cx < anchor.x2 && cy >= anchor.y1 && cy < anchor.y2
            })
            .collect();
        if cells.is_empty() {
            let (cx, cy) = anchor.center();
            let c = ((cx / s) as usize).min(fw - 1);
            let r = ((cy / s) as usize).min(fh - 1);
            cells.push(r * fw + c);
        }
        for cell in cells {
            positive[cell] = true;
            for (j, b) in track.iter().enumerate().take(l) {
                if let Some(b) = b {
                    let (cx, cy) = b.center();
                    let t = [cx / w, cy / h, b.width() / w, b.height() / h];
                    let o = (cell * l + j) * 4;
                    box_target[o..o + 4].copy_from_slice(&t);
                    box_mask[o..o + 4].fill(1.0);
                }
            }
        }
    }
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = g - n_pos;
    let targets: Vec<f32> = positive.iter().map(|&p| f32::from(u8::from(p))).collect();
    let balance: Vec<f32> = positive
        .iter()
        .map(|&p| {
            if p {
                1.0 / n_pos.max(1) as f32
            } else {
                1.0 / n_neg.max(1) as f32
            }
        })
        .collect();
    let obj = bce_with_logits(&stage1.objectness, &Tensor::from_vec(targets, g, device)?)?
        .mul(&Tensor::from_vec(balance, g, device)?)?
        .sum_all()?;
    let n_box = box_mask.iter().filter(|&&m| m > 0.0).count() / 4;
    if n_box == 0 {
        return Ok(obj);
    }
    let scale = Tensor::new(&[w, h, w, h], device)?;
    let pred = stage1.boxes.broadcast_div(&scale)?;
    let target = Tensor::from_vec(box_target, (g, l, 4), device)?;
    let mask = Tensor::from_vec(box_mask, (g, l, 4), device)?;
    let l1 = ((pred - target)?.abs()?.mul(&mask)?.sum_all()? / n_box as f64)?;
    Ok((obj + (l1 * weights.bbox as f64)?)?)
}

/// Full detector loss: match, then set-prediction loss plus the stage-1
/// proposal loss.
pub fn detection_loss(
    out: &DetectorOutput,
    target: &DetectionTarget,
    anchor_position: usize,
    stride: usize,
    weights: &LossWeights,
) -> Result<DetectionLoss> {
    let dets = out.detection_set()?;
    let matching = match_queries(
        &dets.boxes,
        &dets.confidences,
        &target.boxes,
        out.image_size,
        weights,
    );
    let gt: Vec<[f32; 4]> = target
        .boxes
        .iter()
        .map(|b| normalized_cxcywh(b, out.image_size))
        .collect();
    let (set_total, cls, l1, giou) =
        set_prediction_loss(&out.boxes, &out.conf_logits, &gt, &matching, weights)?;
    let proposal = proposal_loss(
        &out.stage1,
        &target.tracks,
        anchor_position,
        stride,
        out.image_size,
        weights,
    )?;
    let total = (set_total + (&proposal * weights.proposal as f64)?)?;
    Ok(DetectionLoss {
        total,
        cls: cls.to_scalar()?,
        bbox: l1.to_scalar()?,
        giou: giou.to_scalar()?,
        proposal: proposal.to_scalar()?,
        matching,
    })
}

#[derive(Debug, Clone)]
pub struct SegmentationLoss {
    pub total: Tensor,
    pub dice: f32,
    pub bce: f32,
}

/// `λ_dice soft-Dice + λ_bce BCE` over `(K, H, W)` mask logits, averaged over
/// the `K` masks. Soft Dice uses +1 smoothing so empty targets are learnable.
pub fn segmentation_loss(
    logits: &Tensor,
    gt: &Tensor,
    weights: &LossWeights,
) -> Result<SegmentationLoss> {
    if logits.dims() != gt.dims() {
        return Err(Error::shape(
            format!("{:?}", gt.dims()),
            format!("{:?}", logits.dims()),
        ));
    }
    let k = logits.dim(0)?;
    if k == 0 {
        let z = Tensor::zeros((), candle_core::DType::F32, logits.device())?;
        return Ok(SegmentationLoss {
            total: z,
            dice: 0.0,
            bce: 0.0,
        });
    }
    let prob = candle_nn::ops::sigmoid(logits)?.flatten_from(1)?;
    let g = gt.flatten_from(1)?;
    let inter = prob.mul(&g)?.sum(D::Minus1)?;
    let denom = ((prob.sum(D::Minus1)? + g.sum(D::Minus1)?)? + 1.0)?;
    let dice = (1.0 - ((inter * 2.0)? + 1.0)?.div(&denom)?)?.mean_all()?;
    let bce = bce_with_logits(logits, gt)?.mean_all()?;
    let total = ((&dice * weights.mask_dice as f64)? + (&bce * weights.mask_bce as f64)?)?;
    Ok(SegmentationLoss {
        total,
        dice: dice.to_scalar()?,
        bce: bce.to_scalar()?,
    })
}

/// Mean BCE of keep logits against `{0, 1}` labels.
pub fn joint_classification_loss(keep_logits: &Tensor, labels: &[f32]) -> Result<Tensor> {
    let n = keep_logits.dim(0)?;
    if n != labels.len() {
        return Err(Error::shape(n, labels.len()));
    }
    if n == 0 {
        return Ok(Tensor::zeros(
            (),
            candle_core::DType::F32,
            keep_logits.device(),
        )?);
    }
    let t = Tensor::from_slice(labels, n, keep_logits.device())?;
    Ok(bce_with_logits(keep_logits, &t)?.mean_all()?)
}

/// Positive iff the box overlaps some ground-truth box with IoU >= 0.5.
pub fn joint_label(candidate: &BBox, gt: &[BBox]) -> f32 {
    f32::from(u8::from(gt.iter().any(|g| g.iou(candidate) >= 0.5)))
}

/// Training target for the joint head: the `joint_label` of candidates that
/// either match a ground-truth box or miss all of them. Partial overlaps
/// (`0 < IoU < 0.5`) return `None` and stay out of the loss, since their masks
/// still cover target pixels and suppressing them costs segmentation.
pub fn joint_target(candidate: &BBox, gt: &[BBox]) -> Option<f32> {
    let best = gt.iter().map(|g| g.iou(candidate)).fold(0.0f32, f32::max);
    if best >= 0.5 {
        Some(1.0)
    } else if best <= 0.0 {
        Some(0.0)
    } else {
        None
    }
}
