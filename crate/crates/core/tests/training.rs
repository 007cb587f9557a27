mod common;

use cosam::checkpoint::{load_model, load_pretrained, save_model};
use cosam::collab::CosamModel;
use cosam::training::{joint_train, pretrain_detector, pretrain_segmenter, Phase};

#[test]
fn detector_pretraining_is_repeatable_and_logs_every_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = common::phantom_splits(dir.path(), 4, 21);
    let cfg = common::short_training(2, 7);
    let run = || {
        let model = CosamModel::new(common::small_model(3, 7)).unwrap();
        let mut seen = 0;
        let log = pretrain_detector(&model, &cfg, &train, &mut |_| seen += 1).unwrap();
        assert_eq!(seen, 2);
        log
    };
    let a = run();
    let b = run();
    assert_eq!(a.len(), 2);
    assert!(a
        .iter()
        .all(|r| r.phase == Phase::Detector && r.loss_total.is_finite()));
    assert_eq!(a, b);
    assert!(a[0].components.contains_key("giou"));
    assert_eq!(a[0].lr["detector"], cfg.lr_detector);
}

#[test]
fn segmenter_pretraining_descends_on_a_tiny_set() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = common::phantom_splits(dir.path(), 2, 22);
    let model = CosamModel::new(common::small_model(3, 8)).unwrap();
    let log =
        pretrain_segmenter(&model, &common::short_training(6, 8), &train, &mut |_| {}).unwrap();
    assert_eq!(log.len(), 6);
    assert!(
        log.last().unwrap().loss_total < log[0].loss_total,
        "{log:?}"
    );
}

#[test]
fn joint_training_moves_all_three_parts() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = common::phantom_splits(dir.path(), 2, 23);
    let ckpt = tempfile::tempdir().unwrap();
    let cfg = common::small_model(3, 9);
    let model = CosamModel::new(cfg.clone()).unwrap();
    let tcfg = common::short_training(1, 9);
    pretrain_detector(&model, &tcfg, &train, &mut |_| {}).unwrap();
    pretrain_segmenter(&model, &tcfg, &train, &mut |_| {}).unwrap();
    let path = ckpt.path().join("pre.safetensors");
    save_model(&model, &path).unwrap();

    let joint = load_pretrained(&cfg, &path, &path).unwrap();
    // Optimizer steps write into the variables' storage, so snapshot by value.
    let before: std::collections::BTreeMap<_, _> = joint
        .params
        .tensors()
        .into_iter()
        .map(|(k, t)| (k, t.copy().unwrap()))
        .collect();
    let log = joint_train(&joint, &tcfg, &train, &mut |_| {}).unwrap();
    assert!(log[0].components.contains_key("joint"));
    let after = joint.params.tensors();
    for prefix in ["det.", "seg.", "joint."] {
        let moved = before
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .any(|(k, t)| {
                let d = (t - &after[k]).unwrap().abs().unwrap().sum_all().unwrap();
                d.to_scalar::<f32>().unwrap() > 0.0
            });
        assert!(moved, "no {prefix} parameter changed");
    }

    let out = ckpt.path().join("joint.safetensors");
    save_model(&joint, &out).unwrap();
    let back = load_model(&out).unwrap();
    assert_eq!(back.config, joint.config);
}

#[test]
fn training_on_empty_data_is_an_error() {
    let model = CosamModel::new(common::small_model(3, 1)).unwrap();
    let empty = cosam::dataset::Dataset {
        volumes: Vec::new(),
    };
    assert!(pretrain_detector(&model, &common::short_training(1, 0), &empty, &mut |_| {}).is_err());
}
