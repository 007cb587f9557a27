//! One-to-one assignment of predicted queries to ground-truth boxes.

use crate::config::LossWeights;
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchResult {
    /// `(query_index, gt_index)`, sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

/// Image-relative `(cx, cy, w, h)`.
pub fn normalized_cxcywh(b: &BBox, image_size: (usize, usize)) -> [f32; 4] {
    let (h, w) = (image_size.0 as f32, image_size.1 as f32);
    let (cx, cy) = b.center();
    [cx / w, cy / h, b.width() / w, b.height() / h]
}

/// `λ_cls (1 - conf) + λ_box L1 + λ_giou (1 - GIoU)`, with L1 over
/// image-relative center-size coordinates.
pub fn pair_cost(
    pred: &BBox,
    conf: f32,
    gt: &BBox,
    image_size: (usize, usize),
    w: &LossWeights,
) -> f64 {
    let p = normalized_cxcywh(pred, image_size);
    let g = normalized_cxcywh(gt, image_size);
    let l1: f32 = p.iter().zip(g.iter()).map(|(a, b)| (a - b).abs()).sum();
    (w.cls * (1.0 - conf) + w.bbox * l1 + w.giou * (1.0 - pred.giou(gt))) as f64
}

pub fn cost_matrix(
    pred_boxes: &[BBox],
    pred_conf: &[f32],
    gt_boxes: &[BBox],
    image_size: (usize, usize),
    weights: &LossWeights,
) -> Vec<Vec<f64>> {
    pred_boxes
        .iter()
        .zip(pred_conf)
        .map(|(p, &c)| {
            gt_boxes
                .iter()
                .map(|g| pair_cost(p, c, g, image_size, weights))
                .collect()
        })
        .collect()
}

/// Minimum-cost assignment of every row to a distinct column for a
/// `rows x cols` matrix with `rows <= cols`. Returns the column of each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian needs rows <= cols");
    // Potentials-based shortest augmenting path, 1-indexed with a virtual column 0.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Minimum-cost one-to-one matching of queries to ground truth.
pub fn match_queries(
    pred_boxes: &[BBox],
    pred_conf: &[f32],
    gt_boxes: &[BBox],
    image_size: (usize, usize),
    weights: &LossWeights,
) -> MatchResult {
    let nq = pred_boxes.len();
    let cost = cost_matrix(pred_boxes, pred_conf, gt_boxes, image_size, weights);
    let mut pairs: Vec<(usize, usize)> = if gt_boxes.is_empty() || nq == 0 {
        Vec::new()
    } else if gt_boxes.len() <= nq {
        let transposed: Vec<Vec<f64>> = (0..gt_boxes.len())
            .map(|g| (0..nq).map(|q| cost[q][g]).collect())
            .collect();
        hungarian(&transposed)
            .into_iter()
            .enumerate()
            .map(|(g, q)| (q, g))
            .collect()
    } else {
        hungarian(&cost).into_iter().enumerate().collect()
    };
    pairs.sort_unstable();
    let matched: Vec<bool> = (0..nq)
        .map(|q| pairs.iter().any(|&(pq, _)| pq == q))
        .collect();
    MatchResult {
        unmatched: (0..nq).filter(|&q| !matched[q]).collect(),
        pairs,
    }
}
