#![allow(dead_code)]

use std::path::Path;

use cosam::config::{DetectorConfig, JointConfig, ModelConfig, SegmenterConfig, TrainConfig};
use cosam::dataset::Dataset;
use cosam::phantom::{generate_dataset, PhantomConfig};
use cosam::volume::Split;

pub fn small_model(window_size: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        detector: DetectorConfig {
            window_size,
            feat_dim: 16,
            n_queries: 4,
            top_m: 8,
            backbone_channels: [4, 8],
            anchor_size: 8.0,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ffn_dim: 16,
            ..Default::default()
        },
        segmenter: SegmenterConfig {
            dim: 16,
            channels: [4, 4, 8],
            decoder_depth: 1,
            heads: 2,
            ffn_dim: 16,
        },
        joint: JointConfig { hidden: 16 },
        seed,
        ..Default::default()
    }
}

pub fn short_training(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        pretrain_epochs_det: epochs,
        pretrain_epochs_seg: epochs,
        joint_epochs: epochs,
        lr_detector: 1e-3,
        lr_segmenter: 1e-3,
        batch_size: 2,
        seed,
        ..Default::default()
    }
}

pub fn phantom_config(seed: u64) -> PhantomConfig {
    PhantomConfig {
        extents: [8, 32, 32],
        n_targets_range: (1, 1),
        target_voxels_range: (40, 120),
        n_distractors_range: (0, 1),
        distractor_radius_range: (1.5, 2.0),
        window_size: 3,
        train_fraction: 0.5,
        roi_margin: 0,
        seed,
        ..Default::default()
    }
}

/// Writes `n` phantoms under `dir` and loads both splits.
pub fn phantom_splits(dir: &Path, n: usize, seed: u64) -> (Dataset, Dataset) {
    let manifest = generate_dataset(&phantom_config(seed), n, dir).unwrap();
    (
        Dataset::load(&manifest, Split::Train, 2).unwrap(),
        Dataset::load(&manifest, Split::Test, 2).unwrap(),
    )
}
