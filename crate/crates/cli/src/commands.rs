use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::Context;
use cosam::ablation::{run_ablation, AblationRow, Variant};
use cosam::checkpoint::{load_model, load_pretrained, read_checkpoint, save_model};
use cosam::collab::CosamModel;
use cosam::dataset::{Dataset, VolumeRecord};
use cosam::eval::{
    evaluate_with, fingerprint, sweep_csv, sweep_window_size, EvalReport, PredictionWriter,
    SlicePrediction,
};
use cosam::phantom::generate_dataset;
use cosam::training::{joint_train, pretrain_detector, pretrain_segmenter, EpochRecord};
use cosam::volume::{extract_window, Split};
use log::info;

use crate::plot::{dice_histogram_svg, pr_curve_svg};
use crate::run::{num_workers, require_file, usage, CliResult, RunConfig, StagedOutput};
use crate::{Common, PhaseArg, SplitArg};

pub const CHECKPOINT_FILE: &str = "model.safetensors";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.json";

fn load_split(manifest: &Path, split: Split) -> CliResult<Dataset> {
    require_file(manifest, "dataset manifest")?;
    Ok(Dataset::load(manifest, split, num_workers()?)?)
}

pub fn phantom(argv: &[String], common: &Common, n: usize) -> CliResult<()> {
    if n == 0 {
        return usage("--n must be at least 1");
    }
    let cfg = RunConfig::load(common.config.as_deref(), common.seed)?;
    let out = StagedOutput::begin(&common.out, common.force)?;
    generate_dataset(&cfg.phantom, n, out.dir())?;
    info!("wrote {n} phantom volumes");
    out.commit(argv, common.config.as_deref(), common.seed)
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    argv: &[String],
    common: &Common,
    phase: PhaseArg,
    data: &Path,
    epochs: Option<usize>,
    window_size: Option<usize>,
    det_ckpt: Option<&Path>,
    seg_ckpt: Option<&Path>,
) -> CliResult<()> {
    let mut cfg = RunConfig::load(common.config.as_deref(), common.seed)?;
    let pretrained = if phase == PhaseArg::Joint {
        let (Some(det), Some(seg)) = (det_ckpt, seg_ckpt) else {
            return usage("the joint phase needs both --det-ckpt and --seg-ckpt");
        };
        require_file(det, "detector checkpoint")?;
        require_file(seg, "segmenter checkpoint")?;
        if common.config.is_none() {
            // Without a config file the architecture comes from the checkpoint.
            let seed = cfg.model.seed;
            cfg.model = read_checkpoint(det)?.config;
            cfg.model.seed = seed;
        }
        Some((det, seg))
    } else {
        None
    };
    if let Some(w) = window_size {
        cfg.model.detector.window_size = w;
    }
    if let Some(e) = epochs {
        match phase {
            PhaseArg::Detector => cfg.train.pretrain_epochs_det = e,
            PhaseArg::Segmenter => cfg.train.pretrain_epochs_seg = e,
            PhaseArg::Joint => cfg.train.joint_epochs = e,
        }
    }
    if let Err(e) = cfg.model.validate().and_then(|_| cfg.train.validate()) {
        return usage(e.to_string());
    }
    let train_set = load_split(data, Split::Train)?;
    let model = match pretrained {
        Some((det, seg)) => load_pretrained(&cfg.model, det, seg)?,
        None => CosamModel::new(cfg.model.clone())?,
    };

    let out = StagedOutput::begin(&common.out, common.force)?;
    let log_path = out.dir().join(TRAIN_LOG);
    let mut log =
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut write_err = None;
    let mut on_epoch = |r: &EpochRecord| {
        let line = serde_json::to_string(r).expect("epoch record serializes");
        if let Err(e) = writeln!(log, "{line}") {
            write_err.get_or_insert(e);
        }
    };
    match phase {
        PhaseArg::Detector => pretrain_detector(&model, &cfg.train, &train_set, &mut on_epoch)?,
        PhaseArg::Segmenter => pretrain_segmenter(&model, &cfg.train, &train_set, &mut on_epoch)?,
        PhaseArg::Joint => joint_train(&model, &cfg.train, &train_set, &mut on_epoch)?,
    };
    if let Some(e) = write_err {
        return Err(anyhow::Error::from(e)
            .context("writing training log")
            .into());
    }
    save_model(&model, out.dir().join(CHECKPOINT_FILE))?;
    fs::write(
        out.dir().join("config.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;
    info!("checkpoint: {}", out.final_path(CHECKPOINT_FILE).display());
    out.commit(argv, common.config.as_deref(), common.seed)
}

pub fn eval(
    argv: &[String],
    common: &Common,
    ckpt: &Path,
    data: &Path,
    split: SplitArg,
) -> CliResult<()> {
    require_file(ckpt, "checkpoint")?;
    let model = load_model(ckpt)?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let dataset = load_split(data, split)?;
    let out = StagedOutput::begin(&common.out, common.force)?;
    let report = evaluate_with(
        &model,
        &dataset,
        model.config.detector.window_size,
        fingerprint(&model.config)?,
        &mut |_| Ok(()),
    )?;
    fs::write(
        out.dir().join(REPORT_FILE),
        serde_json::to_string_pretty(&report)?,
    )?;
    info!(
        "dice {:.4} iou {:.4} ap50 {:.4} over {} slices",
        report.dice, report.iou, report.ap50, report.n_slices
    );
    out.commit(argv, common.config.as_deref(), common.seed)
}

pub fn predict(argv: &[String], common: &Common, ckpt: &Path, volume: &Path) -> CliResult<()> {
    require_file(ckpt, "checkpoint")?;
    if !volume.is_dir() {
        return usage(format!(
            "volume directory {} does not exist",
            volume.display()
        ));
    }
    let model = load_model(ckpt)?;
    let id = volume.file_name().map_or_else(
        || "volume".to_string(),
        |n| n.to_string_lossy().into_owned(),
    );
    let rec = VolumeRecord::load(&id, volume)?;
    let out = StagedOutput::begin(&common.out, common.force)?;
    let mut writer = PredictionWriter::create(out.dir())?;
    let n_slices = rec.volume.extents().0;
    let mut n_boxes = 0;
    for z in 0..n_slices {
        let window = extract_window(&rec.volume, z, model.config.detector.window_size)?;
        let prediction = model.cosam_forward(&window)?;
        n_boxes += prediction.detections.len();
        writer.write(&SlicePrediction {
            volume_id: id.clone(),
            slice_index: z,
            prediction,
        })?;
    }
    info!("{n_boxes} boxes over {n_slices} slices");
    out.commit(argv, common.config.as_deref(), common.seed)
}

pub fn sweep(
    argv: &[String],
    common: &Common,
    data: &Path,
    sizes: &[usize],
    epochs: Option<usize>,
) -> CliResult<()> {
    if let Some(&bad) = sizes.iter().find(|s| **s % 2 == 0 || **s == 0) {
        return usage(format!("window sizes must be odd, got {bad}"));
    }
    let mut cfg = RunConfig::load(common.config.as_deref(), common.seed)?;
    if let Some(e) = epochs {
        cfg.train.pretrain_epochs_det = e;
    }
    let train_set = load_split(data, Split::Train)?;
    let test_set = load_split(data, Split::Test)?;
    let out = StagedOutput::begin(&common.out, common.force)?;
    let rows = sweep_window_size(sizes, &cfg.model, &cfg.train, &train_set, &test_set)?;
    fs::write(out.dir().join("sweep.csv"), sweep_csv(&rows))?;
    fs::write(
        out.dir().join("sweep.json"),
        serde_json::to_string_pretty(&rows)?,
    )?;
    out.commit(argv, common.config.as_deref(), common.seed)
}

pub fn ablate(argv: &[String], common: &Common, data: &Path, seeds: &[u64]) -> CliResult<()> {
    if seeds.is_empty() {
        return usage("--seeds must name at least one seed");
    }
    let cfg = RunConfig::load(common.config.as_deref(), None)?;
    let train_set = load_split(data, Split::Train)?;
    let test_set = load_split(data, Split::Test)?;
    let out = StagedOutput::begin(&common.out, common.force)?;
    let log_path = out.dir().join(TRAIN_LOG);
    let mut log = fs::File::create(&log_path)?;
    let mut rows: Vec<AblationRow> = Vec::new();
    for &seed in seeds {
        let mut on_epoch = |v: Variant, r: &EpochRecord| {
            let mut value = serde_json::to_value(r).expect("epoch record serializes");
            value["seed"] = seed.into();
            value["variant"] = serde_json::to_value(v).expect("variant serializes");
            let _ = writeln!(log, "{value}");
        };
        rows.extend(run_ablation(
            &cfg.model,
            &cfg.train,
            &train_set,
            &test_set,
            seed,
            &mut on_epoch,
        )?);
    }
    let mut csv = String::from("seed,variant,dice,iou,ap50,n_detections\n");
    for r in &rows {
        let variant = serde_json::to_value(r.variant)?;
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{}\n",
            r.seed,
            variant.as_str().unwrap_or_default(),
            r.dice,
            r.iou,
            r.ap50,
            r.n_detections
        ));
    }
    fs::write(out.dir().join("ablation.csv"), csv)?;
    fs::write(
        out.dir().join("ablation.json"),
        serde_json::to_string_pretty(&rows)?,
    )?;
    out.commit(argv, common.config.as_deref(), None)
}

pub fn plot(argv: &[String], common: &Common, report: &Path) -> CliResult<()> {
    require_file(report, "report")?;
    let text = fs::read_to_string(report)?;
    let report: EvalReport = serde_json::from_str(&text)
        .map_err(|e| crate::run::CliError::Usage(format!("not an evaluation report: {e}")))?;
    let out = StagedOutput::begin(&common.out, common.force)?;
    fs::write(
        out.dir().join("pr_curve.svg"),
        pr_curve_svg(&report.pr_curve, report.ap50),
    )?;
    let dice: Vec<f64> = report.per_volume.iter().map(|v| v.dice).collect();
    fs::write(
        out.dir().join("dice_histogram.svg"),
        dice_histogram_svg(&dice, 10),
    )?;
    out.commit(argv, common.config.as_deref(), common.seed)
}
