//! In-memory datasets of labeled volumes and per-slice training samples.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::training::augment::Augmentation;
use crate::training::losses::DetectionTarget;
use crate::volume::{
    boxes_from_mask, component_boxes, extract_window, label_components_2d, label_components_3d,
    load_volume, truncate_and_normalize, CtVolume, LabelVolume, Manifest, SliceSequence, Split,
    VolumeMeta, HU_WINDOW,
};

pub struct VolumeRecord {
    pub id: String,
    pub volume: CtVolume,
    pub label: LabelVolume,
    pub roi_slab: [usize; 2],
    /// 26-connected component ids of the label.
    pub components: Array3<u32>,
    pub n_components: usize,
}

impl VolumeRecord {
    pub fn new(
        id: impl Into<String>,
        volume: CtVolume,
        label: LabelVolume,
        roi_slab: [usize; 2],
    ) -> Result<Self> {
        let volume = if volume.is_normalized() {
            volume
        } else {
            truncate_and_normalize(&volume, HU_WINDOW.0, HU_WINDOW.1)?
        };
        let l = volume.extents().0;
        if roi_slab[0] >= roi_slab[1] || roi_slab[1] > l {
            return Err(Error::param(
                "roi_slab",
                format!("{roi_slab:?} is outside the volume's {l} slices"),
            ));
        }
        let (components, n_components) = label_components_3d(label.data());
        Ok(Self {
            id: id.into(),
            volume,
            label,
            roi_slab,
            components,
            n_components,
        })
    }

    pub fn load(id: &str, dir: &Path) -> Result<Self> {
        let meta = VolumeMeta::read(dir)?;
        let (volume, label) = load_volume(dir)?;
        Self::new(id, volume, label, meta.roi_slab)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceRef {
    pub volume: usize,
    pub slice: usize,
    pub has_foreground: bool,
}

/// A labeled anchor slice with everything the three training phases need.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub window: SliceSequence,
    pub target: DetectionTarget,
    pub anchor_label: Array2<u8>,
    /// Tight box and binary mask of each 2-D component on the anchor slice,
    /// in the order of `target.boxes`.
    pub components: Vec<(BBox, Array2<u8>)>,
}

pub struct Dataset {
    pub volumes: Vec<VolumeRecord>,
}

impl Dataset {
    /// Loads every volume of `split`, using up to `workers` threads.
    pub fn load(manifest_path: &Path, split: Split, workers: usize) -> Result<Self> {
        let manifest = Manifest::read(manifest_path)?;
        let entries: Vec<_> = manifest.split(split).cloned().collect();
        if entries.is_empty() {
            return Err(Error::Dataset(format!(
                "manifest {} has no {split:?} volumes",
                manifest_path.display()
            )));
        }
        let workers = workers.clamp(1, entries.len());
        let chunk = entries.len().div_ceil(workers);
        let results: Vec<Result<Vec<VolumeRecord>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = entries
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|e| {
                                VolumeRecord::load(
                                    &e.volume_id,
                                    &Manifest::resolve(manifest_path, e),
                                )
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("loader thread panicked"))
                .collect()
        });
        let mut volumes = Vec::with_capacity(entries.len());
        for r in results {
            volumes.extend(r?);
        }
        Ok(Self { volumes })
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    /// Every slice of every region-of-interest slab, in volume then slice order.
    pub fn slice_refs(&self) -> Vec<SliceRef> {
        self.volumes
            .iter()
            .enumerate()
            .flat_map(|(vi, v)| {
                (v.roi_slab[0]..v.roi_slab[1]).map(move |z| SliceRef {
                    volume: vi,
                    slice: z,
                    has_foreground: v.label.slice(z).iter().any(|&x| x != 0),
                })
            })
            .collect()
    }

    pub fn window(&self, r: SliceRef, window_size: usize) -> Result<SliceSequence> {
        extract_window(&self.volumes[r.volume].volume, r.slice, window_size)
    }

    /// Builds the (optionally augmented) sample centered on `r`.
    pub fn sample(
        &self,
        r: SliceRef,
        window_size: usize,
        aug: &Augmentation,
    ) -> Result<TrainingSample> {
        let rec = &self.volumes[r.volume];
        let raw = extract_window(&rec.volume, r.slice, window_size)?;
        let window = SliceSequence {
            slices: raw.slices.iter().map(|s| aug.image(s)).collect(),
            ..raw
        };
        let anchor_pos = window.anchor_position();
        let id_frames: Vec<Array2<u32>> = window
            .source_indices
            .iter()
            .map(|&z| aug.geometric(&rec.components.index_axis(ndarray::Axis(0), z).to_owned()))
            .collect();
        let frame_boxes: Vec<Vec<Option<BBox>>> = id_frames
            .iter()
            .map(|f| component_boxes(f.view(), rec.n_components))
            .collect();
        let tracks = (0..rec.n_components)
            .filter(|&k| frame_boxes[anchor_pos][k].is_some())
            .map(|k| frame_boxes.iter().map(|f| f[k]).collect())
            .collect();

        let anchor_label = aug.geometric(&rec.label.slice(r.slice).to_owned());
        let boxes: Vec<BBox> = boxes_from_mask(anchor_label.view(), r.slice)
            .into_iter()
            .map(|g| g.bbox)
            .collect();
        let (ids2d, n2d) = label_components_2d(anchor_label.view());
        let components = boxes
            .iter()
            .enumerate()
            .map(|(k, b)| (*b, ids2d.mapv(|v| u8::from(v as usize == k + 1))))
            .collect();
        debug_assert_eq!(n2d, boxes.len());
        Ok(TrainingSample {
            window,
            target: DetectionTarget { boxes, tracks },
            anchor_label,
            components,
        })
    }
}
