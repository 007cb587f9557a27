//! Collaborative-learning ablation: separately pretrained sub-networks versus
//! joint training without and with the joint classification head.

use serde::{Deserialize, Serialize};

use crate::collab::CosamModel;
use crate::config::{ModelConfig, TrainConfig};
use crate::dataset::Dataset;
use crate::error::Result;
use crate::eval::{evaluate_with, fingerprint};
use crate::training::{joint_train, pretrain_detector, pretrain_segmenter, EpochRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Pretrained detector and segmenter composed as-is, no joint head.
    Pretrained,
    /// Joint training, joint head neither trained nor applied.
    Joint,
    /// Joint training with the joint head trained and applied.
    JointWithHead,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Pretrained, Variant::Joint, Variant::JointWithHead];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub variant: Variant,
    pub dice: f64,
    pub iou: f64,
    pub ap50: f64,
    pub n_detections: usize,
}

/// Trains all three variants for one seed. The joint variants both start
/// from the same pretrained weights that form the `Pretrained` model, and each
/// model's inference config says whether the joint head is applied.
pub fn train_variants(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &Dataset,
    seed: u64,
    on_epoch: &mut dyn FnMut(Variant, &EpochRecord),
) -> Result<Vec<(Variant, CosamModel)>> {
    let model_cfg = ModelConfig {
        seed,
        ..model_cfg.clone()
    };
    let tcfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let base = CosamModel::new(model_cfg)?;
    pretrain_detector(&base, &tcfg, train, &mut |r| {
        on_epoch(Variant::Pretrained, r)
    })?;
    pretrain_segmenter(&base, &tcfg, train, &mut |r| {
        on_epoch(Variant::Pretrained, r)
    })?;

    let mut models = Vec::with_capacity(3);
    for variant in Variant::ALL {
        let mut model = base.fork()?;
        let use_head = variant == Variant::JointWithHead;
        if variant != Variant::Pretrained {
            let cfg = TrainConfig {
                use_joint_head: use_head,
                ..tcfg.clone()
            };
            joint_train(&model, &cfg, train, &mut |r| on_epoch(variant, r))?;
        }
        model.config.inference.use_joint_head = use_head;
        models.push((variant, model));
    }
    Ok(models)
}

pub fn score_variant(
    variant: Variant,
    model: &CosamModel,
    test: &Dataset,
    seed: u64,
) -> Result<AblationRow> {
    let report = evaluate_with(
        model,
        test,
        model.config.detector.window_size,
        fingerprint(&model.config)?,
        &mut |_| Ok(()),
    )?;
    Ok(AblationRow {
        seed,
        variant,
        dice: report.dice,
        iou: report.iou,
        ap50: report.ap50,
        n_detections: report.n_detections,
    })
}

/// Trains and scores all three variants for one seed.
pub fn run_ablation(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
    on_epoch: &mut dyn FnMut(Variant, &EpochRecord),
) -> Result<Vec<AblationRow>> {
    train_variants(model_cfg, train_cfg, train, seed, on_epoch)?
        .iter()
        .map(|(v, m)| score_variant(*v, m, test, seed))
        .collect()
}
