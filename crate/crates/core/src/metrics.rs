//! Overlap metrics for binary masks and AP at IoU 0.5 for boxes.
//!
//! Conventions: two empty masks score 1.0 for both Dice and IoU; AP with no
//! ground truth is 1.0 when there are also no predictions and 0.0 otherwise.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const AP_IOU_THRESHOLD: f32 = 0.5;

/// Pixel counts needed for Dice and IoU; summable for micro-averaging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapCounts {
    pub intersection: u64,
    pub pred: u64,
    pub gt: u64,
}

impl OverlapCounts {
    pub fn from_masks(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<Self> {
        if pred.dim() != gt.dim() {
            return Err(Error::shape(
                format!("{:?}", gt.dim()),
                format!("{:?}", pred.dim()),
            ));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            let (p, g) = (p != 0, g != 0);
            c.pred += u64::from(p);
            c.gt += u64::from(g);
            c.intersection += u64::from(p && g);
        }
        Ok(c)
    }

    pub fn union(&self) -> u64 {
        self.pred + self.gt - self.intersection
    }

    pub fn dice(&self) -> f64 {
        if self.pred + self.gt == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / (self.pred + self.gt) as f64
        }
    }

    pub fn iou(&self) -> f64 {
        if self.union() == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union() as f64
        }
    }
}

impl std::ops::AddAssign for OverlapCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.intersection += rhs.intersection;
        self.pred += rhs.pred;
        self.gt += rhs.gt;
    }
}

/// `2|P∩G| / (|P| + |G|)`.
pub fn dice(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<f64> {
    Ok(OverlapCounts::from_masks(pred, gt)?.dice())
}

/// `|P∩G| / |P∪G|`.
pub fn iou(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<f64> {
    Ok(OverlapCounts::from_masks(pred, gt)?.iou())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub volume_id: String,
    pub slice_index: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "confidence")]
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub volume_id: String,
    pub slice_index: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// One point of the precision/recall staircase, after the k-th prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f32,
    pub precision: f64,
    pub recall: f64,
}

/// Greedy matching in descending score order: each prediction claims the
/// unmatched ground-truth box on the same slice with the highest IoU, if
/// that IoU is at least 0.5. Returns the PR staircase.
pub fn pr_curve(predictions: &[ScoredBox], ground_truth: &[GroundTruthBox]) -> Vec<PrPoint> {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[b]
            .score
            .total_cmp(&predictions[a].score)
            .then(a.cmp(&b))
    });
    let mut claimed = vec![false; ground_truth.len()];
    let mut tp = 0usize;
    let n_gt = ground_truth.len();
    order
        .iter()
        .enumerate()
        .map(|(k, &pi)| {
            let p = &predictions[pi];
            let best = ground_truth
                .iter()
                .enumerate()
                .filter(|(gi, g)| {
                    !claimed[*gi] && g.volume_id == p.volume_id && g.slice_index == p.slice_index
                })
                .map(|(gi, g)| (gi, g.bbox.iou(&p.bbox)))
                .filter(|(_, iou)| *iou >= AP_IOU_THRESHOLD)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            if let Some((gi, _)) = best {
                claimed[gi] = true;
                tp += 1;
            }
            PrPoint {
                score: p.score,
                precision: tp as f64 / (k + 1) as f64,
                recall: if n_gt == 0 {
                    0.0
                } else {
                    tp as f64 / n_gt as f64
                },
            }
        })
        .collect()
}

/// Area under the PR staircase with all-points interpolation.
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (p, interp) in curve.iter().zip(envelope) {
        ap += (p.recall - prev_recall) * interp;
        prev_recall = p.recall;
    }
    ap
}

/// Average precision at box IoU 0.5 over slices.
pub fn ap50(predictions: &[ScoredBox], ground_truth: &[GroundTruthBox]) -> f64 {
    if ground_truth.is_empty() {
        return if predictions.is_empty() { 1.0 } else { 0.0 };
    }
    average_precision(&pr_curve(predictions, ground_truth))
}
