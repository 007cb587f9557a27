//! Test-set evaluation, prediction dumps and the window-size sweep.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::collab::{CosamModel, CosamPrediction, SlicePredictor};
use crate::config::{ModelConfig, TrainConfig};
use crate::dataset::Dataset;
use crate::detector::{select_detections, Detector};
use crate::error::{Error, Result};
use crate::metrics::{ap50, pr_curve, GroundTruthBox, OverlapCounts, PrPoint, ScoredBox};
use crate::training::pretrain_detector;
use crate::volume::boxes_from_mask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeScores {
    pub volume_id: String,
    pub dice: f64,
    pub iou: f64,
    pub ap50: f64,
    pub n_slices: usize,
    pub counts: OverlapCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Micro-averaged over all test slices.
    pub dice: f64,
    pub iou: f64,
    pub ap50: f64,
    /// Mean of per-volume scores.
    pub macro_dice: f64,
    pub macro_iou: f64,
    pub n_slices: usize,
    pub n_detections: usize,
    pub n_ground_truth: usize,
    pub per_volume: Vec<VolumeScores>,
    pub config_fingerprint: String,
    /// Pooled precision/recall staircase behind `ap50`.
    pub pr_curve: Vec<PrPoint>,
}

/// One emitted box, as written to the detection dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub volume_id: String,
    pub slice_index: usize,
    #[serde(rename = "box")]
    pub bbox: crate::geometry::BBox,
    /// Final score: detector confidence times keep probability.
    pub confidence: f32,
    pub detector_confidence: f32,
    pub keep_probability: f32,
}

pub struct SlicePrediction {
    pub volume_id: String,
    pub slice_index: usize,
    pub prediction: CosamPrediction,
}

/// FNV-1a of the config's JSON form.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let text = serde_json::to_string(value)?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    Ok(format!("{h:016x}"))
}

/// Runs `predictor` on every region-of-interest slice and scores it. Calls
/// `sink` with each slice prediction in volume then slice order.
pub fn evaluate_with<P: SlicePredictor + ?Sized>(
    predictor: &P,
    data: &Dataset,
    window_size: usize,
    fingerprint: String,
    sink: &mut dyn FnMut(&SlicePrediction) -> Result<()>,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let mut all_preds = Vec::new();
    let mut all_gt = Vec::new();
    let mut total = OverlapCounts::default();
    let mut per_volume = Vec::with_capacity(data.volumes.len());
    let mut n_slices = 0;
    for rec in &data.volumes {
        let mut counts = OverlapCounts::default();
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for z in rec.roi_slab[0]..rec.roi_slab[1] {
            let window = crate::volume::extract_window(&rec.volume, z, window_size)?;
            let prediction = predictor.predict(&rec.id, &window)?;
            let label = rec.label.slice(z);
            counts += OverlapCounts::from_masks(prediction.segmentation.mask.view(), label)?;
            preds.extend(prediction.detections.iter().map(|d| ScoredBox {
                volume_id: rec.id.clone(),
                slice_index: z,
                bbox: d.bbox,
                score: d.final_score,
            }));
            gts.extend(
                boxes_from_mask(label, z)
                    .into_iter()
                    .map(|g| GroundTruthBox {
                        volume_id: rec.id.clone(),
                        slice_index: z,
                        bbox: g.bbox,
                    }),
            );
            sink(&SlicePrediction {
                volume_id: rec.id.clone(),
                slice_index: z,
                prediction,
            })?;
        }
        n_slices += rec.roi_slab[1] - rec.roi_slab[0];
        total += counts;
        per_volume.push(VolumeScores {
            volume_id: rec.id.clone(),
            dice: counts.dice(),
            iou: counts.iou(),
            ap50: ap50(&preds, &gts),
            n_slices: rec.roi_slab[1] - rec.roi_slab[0],
            counts,
        });
        all_preds.extend(preds);
        all_gt.extend(gts);
    }
    let nv = per_volume.len() as f64;
    Ok(EvalReport {
        dice: total.dice(),
        iou: total.iou(),
        ap50: ap50(&all_preds, &all_gt),
        macro_dice: per_volume.iter().map(|v| v.dice).sum::<f64>() / nv,
        macro_iou: per_volume.iter().map(|v| v.iou).sum::<f64>() / nv,
        n_slices,
        n_detections: all_preds.len(),
        n_ground_truth: all_gt.len(),
        per_volume,
        config_fingerprint: fingerprint,
        pr_curve: pr_curve(&all_preds, &all_gt),
    })
}

/// Full-pipeline evaluation of a model.
pub fn evaluate(model: &CosamModel, data: &Dataset) -> Result<EvalReport> {
    evaluate_with(
        model,
        data,
        model.config.detector.window_size,
        fingerprint(&model.config)?,
        &mut |_| Ok(()),
    )
}

/// Writes detections as JSON lines and each slice mask as an `H x W` raw
/// 8-bit raster at `{volume_id}/{slice_index}.mask` under `out_dir`.
pub struct PredictionWriter {
    out_dir: std::path::PathBuf,
    boxes: fs::File,
}

impl PredictionWriter {
    pub const BOXES_FILE: &'static str = "detections.jsonl";

    pub fn create(out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join(Self::BOXES_FILE);
        let boxes = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            boxes,
        })
    }

    pub fn write(&mut self, p: &SlicePrediction) -> Result<()> {
        for d in &p.prediction.detections {
            let rec = DetectionRecord {
                volume_id: p.volume_id.clone(),
                slice_index: p.slice_index,
                bbox: d.bbox,
                confidence: d.final_score,
                detector_confidence: d.confidence,
                keep_probability: d.keep_probability,
            };
            let line = serde_json::to_string(&rec)?;
            writeln!(self.boxes, "{line}").map_err(|e| Error::io(&self.out_dir, e))?;
        }
        write_mask(
            &self.out_dir,
            &p.volume_id,
            p.slice_index,
            &p.prediction.segmentation.mask,
        )
    }
}

pub fn mask_path(out_dir: &Path, volume_id: &str, slice_index: usize) -> std::path::PathBuf {
    out_dir.join(volume_id).join(format!("{slice_index}.mask"))
}

pub fn write_mask(
    out_dir: &Path,
    volume_id: &str,
    slice_index: usize,
    mask: &Array2<u8>,
) -> Result<()> {
    let path = mask_path(out_dir, volume_id, slice_index);
    let dir = path.parent().expect("mask path has a parent");
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fs::write(&path, mask.iter().copied().collect::<Vec<u8>>()).map_err(|e| Error::io(&path, e))
}

pub fn read_mask(path: &Path, extents: (usize, usize)) -> Result<Array2<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Array2::from_shape_vec(extents, bytes).map_err(|_| Error::Load {
        path: path.to_path_buf(),
        field: "mask".into(),
        reason: format!("expected {}x{} bytes", extents.0, extents.1),
    })
}

/// Detector-only AP50 over the region-of-interest slices.
pub fn evaluate_detector(
    detector: &Detector,
    data: &Dataset,
    conf_threshold: f32,
    nms_iou: f32,
) -> Result<f64> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let w = detector.config().window_size;
    for rec in &data.volumes {
        for z in rec.roi_slab[0]..rec.roi_slab[1] {
            let window = crate::volume::extract_window(&rec.volume, z, w)?;
            let dets = select_detections(
                &detector.forward(&window)?.detection_set()?,
                conf_threshold,
                nms_iou,
            );
            preds.extend(dets.into_iter().map(|d| ScoredBox {
                volume_id: rec.id.clone(),
                slice_index: z,
                bbox: d.bbox,
                score: d.confidence,
            }));
            gts.extend(boxes_from_mask(rec.label.slice(z), z).into_iter().map(|g| {
                GroundTruthBox {
                    volume_id: rec.id.clone(),
                    slice_index: z,
                    bbox: g.bbox,
                }
            }));
        }
    }
    Ok(ap50(&preds, &gts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub window_size: usize,
    pub ap50: f64,
    pub final_loss: f64,
}

/// Trains a fresh detector per window size with the same budget and seed,
/// then scores each on `test`.
pub fn sweep_window_size(
    sizes: &[usize],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<Vec<SweepRow>> {
    if let Some(&bad) = sizes.iter().find(|s| **s % 2 == 0) {
        return Err(Error::param(
            "sizes",
            format!("window sizes must be odd, got {bad}"),
        ));
    }
    sizes
        .iter()
        .map(|&window_size| {
            let mut cfg = model_cfg.clone();
            cfg.detector.window_size = window_size;
            let model = CosamModel::new(cfg)?;
            let log = pretrain_detector(&model, train_cfg, train, &mut |_| {})?;
            let inf = &model.config.inference;
            Ok(SweepRow {
                window_size,
                ap50: evaluate_detector(&model.detector, test, inf.conf_threshold, inf.nms_iou)?,
                final_loss: log.last().map_or(f64::NAN, |r| r.loss_total),
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("window_size,ap50\n");
    for r in rows {
        out.push_str(&format!("{},{:.6}\n", r.window_size, r.ap50));
    }
    out
}
