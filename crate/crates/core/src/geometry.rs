//! Axis-aligned boxes in pixel coordinates.
//!
//! All boxes use the half-open convention: `(x1, y1)` is inclusive and
//! `(x2, y2)` exclusive, so a box painted over pixel columns `5..8` has
//! `x1 = 5, x2 = 8` and width 3.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub const fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center_size(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    /// Reorders corners so that `x1 <= x2` and `y1 <= y2`.
    pub fn canonical(self) -> Self {
        Self::new(
            self.x1.min(self.x2),
            self.y1.min(self.y2),
            self.x1.max(self.x2),
            self.y1.max(self.y2),
        )
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && self.as_array().iter().all(|v| v.is_finite())
    }

    pub fn as_array(&self) -> [f32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn intersection(&self, other: &BBox) -> f32 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        w.max(0.0) * h.max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f32 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Generalized IoU: `iou - (hull - union) / hull`, in `[-1, 1]`.
    pub fn giou(&self, other: &BBox) -> f32 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        let hull = (self.x2.max(other.x2) - self.x1.min(other.x1))
            * (self.y2.max(other.y2) - self.y1.min(other.y1));
        if union <= 0.0 || hull <= 0.0 {
            return 0.0;
        }
        inter / union - (hull - union) / hull
    }

    /// Clips to `[0, width] x [0, height]`, keeping at least `min_size`
    /// pixels of extent on each axis.
    pub fn clip(&self, width: f32, height: f32, min_size: f32) -> Self {
        fn axis(lo: f32, hi: f32, limit: f32, min_size: f32) -> (f32, f32) {
            let min_size = min_size.min(limit);
            let mut lo = lo.clamp(0.0, limit);
            let mut hi = hi.clamp(0.0, limit);
            if hi - lo < min_size {
                let c = ((lo + hi) / 2.0).clamp(min_size / 2.0, limit - min_size / 2.0);
                lo = c - min_size / 2.0;
                hi = c + min_size / 2.0;
            }
            (lo, hi)
        }
        let (x1, x2) = axis(self.x1, self.x2, width, min_size);
        let (y1, y2) = axis(self.y1, self.y2, height, min_size);
        Self::new(x1, y1, x2, y2)
    }

    pub fn scale(&self, sx: f32, sy: f32) -> Self {
        Self::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    /// Integer pixel range covered by the box, clamped to the raster.
    pub fn pixel_range(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let c0 = (self.x1.floor().max(0.0) as usize).min(width);
        let r0 = (self.y1.floor().max(0.0) as usize).min(height);
        let c1 = (self.x2.ceil().max(0.0) as usize).min(width);
        let r1 = (self.y2.ceil().max(0.0) as usize).min(height);
        (r0, r1, c0, c1)
    }
}

/// Greedy non-maximum suppression over `(box, score)` pairs.
///
/// Returns indices into the input, sorted by descending score (ties by
/// ascending index). A box is dropped when its IoU with an already kept box
/// exceeds `iou_threshold`.
pub fn nms(boxes: &[BBox], scores: &[f32], iou_threshold: f32) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for idx in order {
        if keep
            .iter()
            .all(|&k| boxes[k].iou(&boxes[idx]) <= iou_threshold)
        {
            keep.push(idx);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn iou_of_identical_boxes_is_one() {
        let b = BBox::new(1.0, 2.0, 5.0, 7.0);
        assert_relative_eq!(b.iou(&b), 1.0);
        assert_relative_eq!(b.giou(&b), 1.0);
    }

    #[test]
    fn half_overlap() {
        let a = BBox::new(0.0, 0.0, 4.0, 4.0);
        let b = BBox::new(2.0, 0.0, 6.0, 4.0);
        assert_relative_eq!(a.iou(&b), 8.0 / 24.0);
    }

    #[test]
    fn giou_penalizes_distance() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let near = BBox::new(3.0, 0.0, 5.0, 2.0);
        let far = BBox::new(8.0, 0.0, 10.0, 2.0);
        assert_eq!(a.iou(&near), 0.0);
        assert!(a.giou(&far) < a.giou(&near));
        assert!(a.giou(&far) > -1.0);
    }

    #[test]
    fn clip_keeps_minimum_extent() {
        let b = BBox::new(-5.0, 30.0, -1.0, 40.0).clip(32.0, 32.0, 1.0);
        assert!(b.is_valid());
        assert!(b.x1 >= 0.0 && b.x2 <= 32.0 && b.y2 <= 32.0);
        assert!(b.width() >= 1.0 - 1e-6);
    }

    #[test]
    fn nms_drops_duplicates_keeps_disjoint() {
        let boxes = [
            BBox::new(0.0, 0.0, 4.0, 4.0),
            BBox::new(0.0, 0.0, 4.0, 4.0),
            BBox::new(10.0, 10.0, 14.0, 14.0),
        ];
        let keep = nms(&boxes, &[0.8, 0.9, 0.5], 0.5);
        assert_eq!(keep, vec![1, 2]);
    }
}
