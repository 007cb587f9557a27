use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub window_size: usize,
    /// Token width `D` shared by RoI features, encoder, decoder and queries.
    pub feat_dim: usize,
    pub n_queries: usize,
    pub top_m: usize,
    pub backbone_channels: [usize; 2],
    /// Pixel stride of the backbone feature maps.
    pub stride: usize,
    pub roi_pool_size: usize,
    /// Side length in pixels of every column's base box.
    pub anchor_size: f32,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            window_size: 9,
            feat_dim: 64,
            n_queries: 16,
            top_m: 64,
            backbone_channels: [16, 32],
            stride: 4,
            roi_pool_size: 3,
            anchor_size: 12.0,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ffn_dim: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    /// Bottleneck / token width `D_s`.
    pub dim: usize,
    /// Channels of the three full-, half- and quarter-resolution skip levels.
    pub channels: [usize; 3],
    pub decoder_depth: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            channels: [8, 16, 32],
            decoder_depth: 1,
            heads: 4,
            ffn_dim: 128,
        }
    }
}

impl SegmenterConfig {
    /// Total downsampling of the image encoder.
    pub const STRIDE: usize = 8;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointConfig {
    pub hidden: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self { hidden: 64 }
    }
}

/// Inference-time thresholds of the collaborative pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub conf_threshold: f32,
    pub nms_iou: f32,
    pub keep_threshold: f32,
    pub binarize_threshold: f32,
    /// Apply the joint classification head. Off reproduces the "no CCM" ablation.
    pub use_joint_head: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.3,
            nms_iou: 0.5,
            keep_threshold: 0.5,
            binarize_threshold: 0.5,
            use_joint_head: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ModelConfig {
    pub detector: DetectorConfig,
    pub segmenter: SegmenterConfig,
    pub joint: JointConfig,
    pub inference: InferenceConfig,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.detector;
        if d.window_size == 0 || d.window_size % 2 == 0 {
            return Err(Error::param(
                "window_size",
                format!("must be odd, got {}", d.window_size),
            ));
        }
        if d.feat_dim % d.heads != 0 || self.segmenter.dim % self.segmenter.heads != 0 {
            return Err(Error::param(
                "heads",
                "token widths must be divisible by the head count",
            ));
        }
        if self.segmenter.dim % 2 != 0 {
            return Err(Error::param("segmenter.dim", "must be even"));
        }
        if d.n_queries == 0 || d.top_m == 0 || d.roi_pool_size == 0 || d.stride == 0 {
            return Err(Error::param(
                "detector",
                "n_queries, top_m, roi_pool_size and stride must be >= 1",
            ));
        }
        let i = &self.inference;
        for (name, v) in [
            ("conf_threshold", i.conf_threshold),
            ("nms_iou", i.nms_iou),
            ("keep_threshold", i.keep_threshold),
            ("binarize_threshold", i.binarize_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Param {
                    name: "inference",
                    reason: format!("{name} must be in [0, 1], got {v}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cls: f32,
    pub bbox: f32,
    pub giou: f32,
    pub mask_dice: f32,
    pub mask_bce: f32,
    pub joint: f32,
    /// Stage-1 proposal objectness and track regression.
    pub proposal: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            bbox: 5.0,
            giou: 2.0,
            mask_dice: 1.0,
            mask_bce: 1.0,
            joint: 1.0,
            proposal: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub crop: bool,
    /// Crop extents `[rows, cols]`; must keep both divisible by 8.
    pub crop_size: [usize; 2],
    pub flip: bool,
    pub contrast: bool,
    pub gain_range: (f32, f32),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: false,
            crop_size: [48, 48],
            flip: true,
            contrast: true,
            gain_range: (0.8, 1.2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub pretrain_epochs_det: usize,
    pub pretrain_epochs_seg: usize,
    pub joint_epochs: usize,
    pub lr_detector: f64,
    pub lr_segmenter: f64,
    pub lr_joint: f64,
    /// Samples whose gradients are accumulated per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub augment: AugmentConfig,
    /// Train and use the joint classification head during joint training.
    pub use_joint_head: bool,
    /// Detector candidates fed to the segmenter per sample during joint training.
    pub joint_candidates: usize,
    /// Fraction of slices without foreground kept per epoch.
    pub negative_fraction: f64,
    /// GT-box prompt jitter as a fraction of box size.
    pub prompt_jitter: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs_det: 100,
            pretrain_epochs_seg: 100,
            joint_epochs: 100,
            lr_detector: 1e-4,
            lr_segmenter: 1e-4,
            lr_joint: 1e-3,
            batch_size: 1,
            seed: 0,
            loss_weights: LossWeights::default(),
            augment: AugmentConfig::default(),
            use_joint_head: true,
            joint_candidates: 4,
            negative_fraction: 0.25,
            prompt_jitter: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be >= 1"));
        }
        for (name, lr) in [
            ("lr_detector", self.lr_detector),
            ("lr_segmenter", self.lr_segmenter),
            ("lr_joint", self.lr_joint),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Param {
                    name: "learning rate",
                    reason: format!("{name} must be positive, got {lr}"),
                });
            }
        }
        let w = &self.loss_weights;
        if [
            w.cls,
            w.bbox,
            w.giou,
            w.mask_dice,
            w.mask_bce,
            w.joint,
            w.proposal,
        ]
        .iter()
        .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::param(
                "loss_weights",
                "must be finite and non-negative",
            ));
        }
        if !(0.0..=1.0).contains(&self.negative_fraction) {
            return Err(Error::param("negative_fraction", "must be in [0, 1]"));
        }
        let (g0, g1) = self.augment.gain_range;
        if !(g0 > 0.0 && g0 <= g1) {
            return Err(Error::param("gain_range", "need 0 < min <= max"));
        }
        Ok(())
    }
}
