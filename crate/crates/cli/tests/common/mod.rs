#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn cosam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cosam"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("COSAM_NUM_WORKERS", "2")
        .output()
        .expect("binary runs")
}

pub fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small model, short schedule, small phantoms.
pub fn small_config() -> Value {
    json!({
        "model": {
            "detector": {
                "window_size": 3, "feat_dim": 16, "n_queries": 4, "top_m": 8,
                "backbone_channels": [4, 8], "anchor_size": 8.0,
                "encoder_layers": 1, "decoder_layers": 1, "heads": 2, "ffn_dim": 16
            },
            "segmenter": { "dim": 16, "channels": [4, 4, 8], "heads": 2, "ffn_dim": 16 },
            "joint": { "hidden": 16 },
            "inference": { "conf_threshold": 0.0 }
        },
        "train": {
            "pretrain_epochs_det": 1, "pretrain_epochs_seg": 1, "joint_epochs": 1,
            "lr_detector": 1e-3, "lr_segmenter": 1e-3, "batch_size": 2
        },
        "phantom": {
            "extents": [8, 32, 32], "n_targets_range": [1, 1], "target_voxels_range": [40, 120],
            "n_distractors_range": [0, 1], "distractor_radius_range": [1.5, 2.0],
            "window_size": 3, "train_fraction": 0.5, "roi_margin": 0
        }
    })
}

pub fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
