//! Collaborative processing: joint classification of detector candidates from
//! mask tokens and sequence features, false-positive suppression, and merging
//! of partial masks into one slice segmentation.

use candle_core::{Module, Tensor};
use ndarray::Array2;
use serde::Serialize;

use crate::config::{InferenceConfig, ModelConfig};
use crate::detector::{select_detections, Detection, Detector, DetectorOutput};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{Init, Mlp, ParamStore};
use crate::segmenter::{PartialMaskResult, Segmenter};
use crate::volume::SliceSequence;

#[derive(Debug, Clone)]
pub struct JointCandidate {
    /// `(D_s,)` mask token.
    pub token: Tensor,
    /// `(D,)` pooled sequence features of the routed proposal.
    pub sequence_feature: Tensor,
    pub confidence: f32,
    pub bbox: BBox,
}

#[derive(Debug, Clone)]
pub struct JointHead {
    mlp: Mlp,
    input_dim: usize,
    /// Per-dimension standardization `(x - shift) * scale` of the concatenated
    /// input. Fitted from data, not by the optimizer; identity until set.
    shift: Tensor,
    scale: Tensor,
}

impl JointHead {
    /// MLP weights live in `p`; the input statistics in `stats`, which must
    /// not be handed to an optimizer.
    pub fn new(
        p: &ParamStore,
        stats: &ParamStore,
        token_dim: usize,
        feature_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        let input_dim = token_dim + feature_dim;
        Ok(Self {
            mlp: Mlp::new(&p.pp("mlp"), &[input_dim, hidden, 1])?,
            input_dim,
            shift: stats.var("shift", &[input_dim], Init::Const(0.0))?,
            scale: stats.var("scale", &[input_dim], Init::Const(1.0))?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Keep logits `(K,)` for `(K, D_s + D)` inputs.
    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        let (_, d) = input.dims2()?;
        if d != self.input_dim {
            return Err(Error::shape(
                format!("joint input width {}", self.input_dim),
                d,
            ));
        }
        let x = input
            .broadcast_sub(&self.shift)?
            .broadcast_mul(&self.scale)?;
        Ok(self.mlp.forward(&x)?.squeeze(1)?)
    }

    /// Keep logits for stacked tokens `(K, D_s)` and features `(K, D)`.
    pub fn pair_logits(&self, tokens: &Tensor, features: &Tensor) -> Result<Tensor> {
        self.logits(&Tensor::cat(&[tokens, features], 1)?)
    }
}

/// Keep probability of one candidate.
pub fn joint_classify(head: &JointHead, c: &JointCandidate) -> Result<f32> {
    let input = Tensor::cat(&[&c.token, &c.sequence_feature], 0)?.unsqueeze(0)?;
    let logit = head.logits(&input)?;
    Ok(candle_nn::ops::sigmoid(&logit)?.to_vec1::<f32>()?[0])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Survivor {
    pub index: usize,
    pub keep_probability: f32,
    pub final_score: f32,
}

/// Drops candidates whose keep probability is below `keep_threshold`; the
/// survivors keep input order and score `confidence * keep_probability`.
pub fn suppress(
    confidences: &[f32],
    keep_probabilities: &[f32],
    keep_threshold: f32,
) -> Vec<Survivor> {
    confidences
        .iter()
        .zip(keep_probabilities)
        .enumerate()
        .filter(|(_, (_, &k))| k >= keep_threshold)
        .map(|(index, (&c, &k))| Survivor {
            index,
            keep_probability: k,
            final_score: c * k,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceSegmentation {
    pub mask: Array2<u8>,
    /// Indices into the merged input list.
    pub contributors: Vec<usize>,
}

/// Pixelwise maximum of the probability masks, then `>= threshold`.
pub fn merge_partial_masks(
    masks: &[&Array2<f32>],
    extents: (usize, usize),
    binarize_threshold: f32,
) -> Result<SliceSegmentation> {
    let mut max = Array2::<f32>::zeros(extents);
    for m in masks {
        if m.dim() != extents {
            return Err(Error::shape(
                format!("{extents:?}"),
                format!("{:?}", m.dim()),
            ));
        }
        max.zip_mut_with(m, |a, &b| *a = a.max(b));
    }
    // Nothing merged means nothing segmented, even at threshold 0.
    let mask = if masks.is_empty() {
        Array2::zeros(extents)
    } else {
        max.mapv(|v| u8::from(v >= binarize_threshold))
    };
    Ok(SliceSegmentation {
        mask,
        contributors: (0..masks.len()).collect(),
    })
}

/// True if the binarized mask has a foreground pixel inside `bbox`.
pub fn mask_hits_box(mask: &Array2<f32>, bbox: &BBox, binarize_threshold: f32) -> bool {
    let (h, w) = mask.dim();
    let (r0, r1, c0, c1) = bbox.pixel_range(w, h);
    (r0..r1).any(|r| (c0..c1).any(|c| mask[[r, c]] >= binarize_threshold))
}

#[derive(Debug, Clone, Serialize)]
pub struct FinalDetection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f32,
    pub keep_probability: f32,
    pub final_score: f32,
    pub query_index: usize,
}

#[derive(Debug, Clone)]
pub struct CosamPrediction {
    pub segmentation: SliceSegmentation,
    pub detections: Vec<FinalDetection>,
}

/// Anything that maps a window to a slice segmentation and scored boxes.
pub trait SlicePredictor {
    fn predict(&self, volume_id: &str, window: &SliceSequence) -> Result<CosamPrediction>;
}

const JOINT_STATS: &str = "joint_stats";

/// Detector, segmenter and joint head sharing one parameter store under the
/// `det`, `seg` and `joint` prefixes; the joint head's input statistics sit
/// under `joint_stats`.
pub struct CosamModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub detector: Detector,
    pub segmenter: Segmenter,
    pub joint: JointHead,
}

impl CosamModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Self::with_params(config.clone(), ParamStore::new(config.seed))
    }

    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let detector = Detector::new(&params.pp("det"), &config.detector)?;
        let segmenter = Segmenter::new(&params.pp("seg"), &config.segmenter)?;
        let joint = JointHead::new(
            &params.pp("joint"),
            &params.pp(JOINT_STATS),
            config.segmenter.dim,
            config.detector.feat_dim,
            config.joint.hidden,
        )?;
        Ok(Self {
            config,
            params,
            detector,
            segmenter,
            joint,
        })
    }

    /// Independent copy with the same configuration and parameter values.
    pub fn fork(&self) -> Result<Self> {
        let tensors = self
            .params
            .tensors()
            .into_iter()
            .map(|(k, t)| Ok((k, t.copy()?)))
            .collect::<Result<_>>()?;
        Self::with_params(
            self.config.clone(),
            ParamStore::with_loaded(self.config.seed, tensors),
        )
    }

    /// Full pipeline on one window with the model's inference thresholds.
    pub fn cosam_forward(&self, window: &SliceSequence) -> Result<CosamPrediction> {
        self.forward_with(window, &self.config.inference)
    }

    pub fn forward_with(
        &self,
        window: &SliceSequence,
        inf: &InferenceConfig,
    ) -> Result<CosamPrediction> {
        let out = self.detector.forward(window)?;
        let dets = select_detections(&out.detection_set()?, inf.conf_threshold, inf.nms_iou);
        let partials = self.segmenter.segment_candidates(
            window.anchor(),
            &dets
                .iter()
                .map(|d| (d.bbox, d.query_index))
                .collect::<Vec<_>>(),
        )?;
        let keep = if inf.use_joint_head && !dets.is_empty() {
            self.keep_probabilities(&out, &dets, &partials)?
        } else {
            vec![1.0; dets.len()]
        };
        let confidences: Vec<f32> = dets.iter().map(|d| d.confidence).collect();
        // A box survives only if its own mask puts foreground inside it, which
        // keeps every emitted box backed by segmented pixels.
        let survivors: Vec<Survivor> = suppress(&confidences, &keep, inf.keep_threshold)
            .into_iter()
            .filter(|s| {
                mask_hits_box(
                    &partials[s.index].mask,
                    &dets[s.index].bbox,
                    inf.binarize_threshold,
                )
            })
            .collect();
        let masks: Vec<&Array2<f32>> = survivors.iter().map(|s| &partials[s.index].mask).collect();
        let mut segmentation =
            merge_partial_masks(&masks, window.slice_extents(), inf.binarize_threshold)?;
        segmentation.contributors = survivors.iter().map(|s| s.index).collect();
        let detections = survivors
            .iter()
            .map(|s| {
                let d = &dets[s.index];
                FinalDetection {
                    bbox: d.bbox,
                    confidence: d.confidence,
                    keep_probability: s.keep_probability,
                    final_score: s.final_score,
                    query_index: d.query_index,
                }
            })
            .collect();
        Ok(CosamPrediction {
            segmentation,
            detections,
        })
    }

    /// Joint-head keep probabilities for selected detections.
    pub fn keep_probabilities(
        &self,
        out: &DetectorOutput,
        dets: &[Detection],
        partials: &[PartialMaskResult],
    ) -> Result<Vec<f32>> {
        let features = self.routed_features(out, dets.iter().map(|d| d.query_index))?;
        let tokens = Tensor::stack(
            &partials.iter().map(|p| p.token.clone()).collect::<Vec<_>>(),
            0,
        )?;
        let logits = self.joint.pair_logits(&tokens, &features)?;
        Ok(candle_nn::ops::sigmoid(&logits)?.to_vec1::<f32>()?)
    }

    /// Sets the joint head's input standardization from sample rows
    /// `(N, D_s + D)`. Near-constant dimensions are left unscaled.
    pub fn fit_joint_input_stats(&self, inputs: &Tensor) -> Result<()> {
        let (n, d) = inputs.dims2()?;
        if n == 0 || d != self.joint.input_dim() {
            return Err(Error::shape(
                format!("(N>0, {})", self.joint.input_dim()),
                format!("({n}, {d})"),
            ));
        }
        let mean = inputs.mean(0)?;
        let std = inputs
            .broadcast_sub(&mean)?
            .sqr()?
            .mean(0)?
            .sqrt()?
            .to_vec1::<f32>()?;
        let scale: Vec<f32> = std
            .iter()
            .map(|&s| if s > 1e-6 { 1.0 / s } else { 1.0 })
            .collect();
        let scale = Tensor::from_vec(scale, d, inputs.device())?;
        for (name, value) in [("shift", &mean), ("scale", &scale)] {
            let full = format!("{JOINT_STATS}.{name}");
            let (_, var) = self
                .params
                .all_vars()
                .into_iter()
                .find(|(k, _)| *k == full)
                .ok_or_else(|| Error::Checkpoint(format!("missing variable {full}")))?;
            var.set(value)?;
        }
        Ok(())
    }

    /// `(K, D)` sequence summaries of the proposals routed to each query.
    pub fn routed_features(
        &self,
        out: &DetectorOutput,
        queries: impl Iterator<Item = usize>,
    ) -> Result<Tensor> {
        let routes = out.routed_proposals()?;
        let rows = queries
            .map(|q| out.sequence_summary(routes[q]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&rows, 0)?)
    }
}

impl SlicePredictor for CosamModel {
    fn predict(&self, _volume_id: &str, window: &SliceSequence) -> Result<CosamPrediction> {
        self.cosam_forward(window)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DetectorConfig, JointConfig, SegmenterConfig};
    use candle_core::{Device, Var};

    fn mask_from(bits: &[(usize, usize)], v: f32) -> Array2<f32> {
        let mut m = Array2::zeros((8, 8));
        for &(r, c) in bits {
            m[[r, c]] = v;
        }
        m
    }

    #[test]
    fn merge_conventions() {
        let seg = merge_partial_masks(&[], (8, 8), 0.5).unwrap();
        assert_eq!(seg.mask.sum(), 0);
        let a = mask_from(&[(0, 0), (1, 1)], 0.7);
        let seg = merge_partial_masks(&[&a], (8, 8), 0.5).unwrap();
        assert_eq!(seg.mask, a.mapv(|v| u8::from(v >= 0.5)));
        let b = mask_from(&[(5, 5), (6, 6), (7, 7)], 0.9);
        let seg = merge_partial_masks(&[&a, &b], (8, 8), 0.5).unwrap();
        assert_eq!(seg.mask.iter().map(|&v| v as usize).sum::<usize>(), 5);
        assert!(merge_partial_masks(&[&Array2::zeros((4, 8))], (8, 8), 0.5).is_err());
    }

    #[test]
    fn merge_is_permutation_invariant_and_idempotent() {
        let a = mask_from(&[(0, 0), (2, 3)], 0.6);
        let b = mask_from(&[(2, 3), (4, 4)], 0.4);
        let ab = merge_partial_masks(&[&a, &b], (8, 8), 0.5).unwrap().mask;
        let ba = merge_partial_masks(&[&b, &a], (8, 8), 0.5).unwrap().mask;
        let aab = merge_partial_masks(&[&a, &a, &b], (8, 8), 0.5)
            .unwrap()
            .mask;
        assert_eq!(ab, ba);
        assert_eq!(ab, aab);
    }

    #[test]
    fn suppression_rules() {
        let conf = [0.9, 0.7, 0.8];
        let all = suppress(&conf, &[1.0, 1.0, 1.0], 0.5);
        assert_eq!(
            all.iter().map(|s| s.final_score).collect::<Vec<_>>(),
            conf.to_vec()
        );
        let dropped = suppress(&conf, &[0.0, 1.0, 1.0], 0.5);
        assert_eq!(
            dropped.iter().map(|s| s.index).collect::<Vec<_>>(),
            vec![1, 2]
        );
        assert_eq!(suppress(&conf, &[0.0, 0.1, 0.2], 0.0).len(), 3);
    }

    #[test]
    fn joint_head_range_and_zero_weights() {
        let p = ParamStore::new(0);
        let head = JointHead::new(&p, &p.pp("stats"), 6, 4, 8).unwrap();
        let c = JointCandidate {
            token: Tensor::new(&[1.0f32, -2.0, 0.5, 0.0, 3.0, 1.0], &Device::Cpu).unwrap(),
            sequence_feature: Tensor::new(&[0.3f32, 0.2, -1.0, 2.0], &Device::Cpu).unwrap(),
            confidence: 0.9,
            bbox: BBox::new(0.0, 0.0, 4.0, 4.0),
        };
        let k = joint_classify(&head, &c).unwrap();
        assert!((0.0..=1.0).contains(&k));
        for (_, v) in p.all_vars() {
            v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        }
        assert_eq!(joint_classify(&head, &c).unwrap(), 0.5);
        let bad = Tensor::zeros((1, 7), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(head.logits(&bad).is_err());
    }

    #[test]
    fn joint_head_gradients_reach_both_inputs() {
        let p = ParamStore::new(1);
        let head = JointHead::new(&p, &p.pp("stats"), 6, 4, 8).unwrap();
        let t = Var::new(&[[1.0f32, -2.0, 0.5, 0.1, 3.0, 1.0]], &Device::Cpu).unwrap();
        let f = Var::new(&[[0.3f32, 0.2, -1.0, 2.0]], &Device::Cpu).unwrap();
        let loss = head
            .pair_logits(t.as_tensor(), f.as_tensor())
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        for v in [&t, &f] {
            let g = grads
                .get(v.as_tensor())
                .unwrap()
                .abs()
                .unwrap()
                .sum_all()
                .unwrap();
            assert!(g.to_scalar::<f32>().unwrap() > 0.0);
        }
    }

    fn tiny_config(window: usize) -> ModelConfig {
        ModelConfig {
            detector: DetectorConfig {
                window_size: window,
                feat_dim: 16,
                n_queries: 4,
                top_m: 8,
                backbone_channels: [4, 8],
                heads: 2,
                ffn_dim: 32,
                encoder_layers: 1,
                decoder_layers: 1,
                ..Default::default()
            },
            segmenter: SegmenterConfig {
                dim: 16,
                channels: [4, 8, 8],
                heads: 2,
                ffn_dim: 32,
                ..Default::default()
            },
            joint: JointConfig { hidden: 8 },
            ..Default::default()
        }
    }

    fn window(n: usize, w: usize) -> SliceSequence {
        let slices = (0..w)
            .map(|k| {
                Array2::from_shape_fn((n, n), |(r, c)| ((r * 5 + c * 3 + k) % 13) as f32 / 12.0)
            })
            .collect();
        SliceSequence {
            slices,
            anchor_slice: w / 2,
            source_indices: (0..w).collect(),
            pad_mask: vec![false; w],
        }
    }

    #[test]
    fn pipeline_is_consistent_and_composed() {
        let model = CosamModel::new(tiny_config(3)).unwrap();
        let inf = InferenceConfig {
            conf_threshold: 0.0,
            keep_threshold: 0.0,
            binarize_threshold: 0.3,
            ..Default::default()
        };
        let seq = window(32, 3);
        let pred = model.forward_with(&seq, &inf).unwrap();
        assert_eq!(pred.segmentation.mask.dim(), (32, 32));
        for d in &pred.detections {
            let (r0, r1, c0, c1) = d.bbox.pixel_range(32, 32);
            let hit = (r0..r1).any(|r| (c0..c1).any(|c| pred.segmentation.mask[[r, c]] == 1));
            assert!(hit, "box without mask support");
        }
        // Merge of exactly the contributing partial masks.
        let out = model.detector.forward(&seq).unwrap();
        let dets = select_detections(
            &out.detection_set().unwrap(),
            inf.conf_threshold,
            inf.nms_iou,
        );
        let partials = model
            .segmenter
            .segment_candidates(
                seq.anchor(),
                &dets
                    .iter()
                    .map(|d| (d.bbox, d.query_index))
                    .collect::<Vec<_>>(),
            )
            .unwrap();
        let masks: Vec<&Array2<f32>> = pred
            .segmentation
            .contributors
            .iter()
            .map(|&i| &partials[i].mask)
            .collect();
        assert_eq!(
            merge_partial_masks(&masks, (32, 32), 0.3).unwrap().mask,
            pred.segmentation.mask
        );
    }

    #[test]
    fn nothing_survives_high_threshold() {
        let model = CosamModel::new(tiny_config(3)).unwrap();
        let inf = InferenceConfig {
            conf_threshold: 1.0,
            ..Default::default()
        };
        let pred = model.forward_with(&window(32, 3), &inf).unwrap();
        assert!(pred.detections.is_empty());
        assert_eq!(pred.segmentation.mask.sum(), 0);
    }
}
