//! Volumetric scans, labels, and the on-disk volume directory format.
//!
//! A volume directory holds `meta.json`, `image.raw` (f32 little-endian,
//! slice-major then row-major) and `label.raw` (u8, same order).

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const META_FILE: &str = "meta.json";
pub const IMAGE_FILE: &str = "image.raw";
pub const LABEL_FILE: &str = "label.raw";

/// Default HU window for soft tissue.
pub const HU_WINDOW: (f32, f32) = (-100.0, 100.0);

#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    data: Array3<f32>,
    spacing_mm: [f32; 3],
    normalized: bool,
}

impl CtVolume {
    pub fn new(data: Array3<f32>, spacing_mm: [f32; 3], normalized: bool) -> Result<Self> {
        let (l, h, w) = data.dim();
        if l == 0 || h == 0 || w == 0 {
            return Err(Error::param(
                "extents",
                format!("all extents must be >= 1, got {:?}", (l, h, w)),
            ));
        }
        if spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::param(
                "spacing_mm",
                format!("must be positive, got {spacing_mm:?}"),
            ));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::param("data", format!("non-finite value {v}")));
        }
        if normalized && data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::param(
                "data",
                "normalized volume has values outside [0, 1]",
            ));
        }
        Ok(Self {
            data,
            spacing_mm,
            normalized,
        })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn spacing_mm(&self) -> [f32; 3] {
        self.spacing_mm
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// `(slices, rows, cols)`.
    pub fn extents(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn slice(&self, index: usize) -> ArrayView2<'_, f32> {
        self.data.index_axis(Axis(0), index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    data: Array3<u8>,
}

impl LabelVolume {
    /// Binarizes: any nonzero value becomes 1.
    pub fn new(data: Array3<u8>) -> Self {
        Self {
            data: data.mapv(|v| u8::from(v != 0)),
        }
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn extents(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn slice(&self, index: usize) -> ArrayView2<'_, u8> {
        self.data.index_axis(Axis(0), index)
    }
}

#[derive(Debug, Clone)]
pub struct SlicePair {
    pub image: Array2<f32>,
    pub label: Array2<u8>,
    pub volume_id: String,
    pub slice_index: usize,
}

/// A window of consecutive slices centered on an anchor slice.
#[derive(Debug, Clone)]
pub struct SliceSequence {
    pub slices: Vec<Array2<f32>>,
    /// Volume index of the central slice.
    pub anchor_slice: usize,
    /// Volume index each window position was read from (after edge replication).
    pub source_indices: Vec<usize>,
    pub pad_mask: Vec<bool>,
}

impl SliceSequence {
    pub fn window_size(&self) -> usize {
        self.slices.len()
    }

    /// Position of the anchor inside the window.
    pub fn anchor_position(&self) -> usize {
        self.slices.len() / 2
    }

    pub fn slice_extents(&self) -> (usize, usize) {
        self.slices[0].dim()
    }

    pub fn anchor(&self) -> &Array2<f32> {
        &self.slices[self.anchor_position()]
    }
}

/// Ground-truth box for one connected foreground component of a slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub slice_index: usize,
    pub component_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    /// `[L, H, W]`.
    pub extents: [usize; 3],
    /// `[z, y, x]`.
    pub spacing_mm: [f32; 3],
    pub dtype: String,
    /// Half-open `[lo, hi)` range of slices that belong to the region of interest.
    pub roi_slab: [usize; 2],
    /// Images already mapped to `[0, 1]`; otherwise values are HU.
    #[serde(default)]
    pub normalized: bool,
}

impl VolumeMeta {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: VolumeMeta = serde_json::from_str(&text).map_err(|e| Error::Load {
            path: path.clone(),
            field: "meta.json".into(),
            reason: e.to_string(),
        })?;
        if meta.dtype != "f32" {
            return Err(Error::Load {
                path,
                field: "dtype".into(),
                reason: format!("unsupported dtype {:?}, expected \"f32\"", meta.dtype),
            });
        }
        Ok(meta)
    }
}

fn read_raw(dir: &Path, file: &str) -> Result<Vec<u8>> {
    let path = dir.join(file);
    fs::read(&path).map_err(|e| Error::io(path, e))
}

/// Loads `meta.json`, `image.raw` and `label.raw` from a volume directory.
pub fn load_volume(dir: impl AsRef<Path>) -> Result<(CtVolume, LabelVolume)> {
    let dir = dir.as_ref();
    let meta = VolumeMeta::read(dir)?;
    let [l, h, w] = meta.extents;
    let n = l * h * w;
    let load_err = |field: &str, reason: String| Error::Load {
        path: dir.to_path_buf(),
        field: field.to_string(),
        reason,
    };

    let image_bytes = read_raw(dir, IMAGE_FILE)?;
    if image_bytes.len() != n * 4 {
        return Err(load_err(
            "image.raw",
            format!(
                "extent mismatch: meta declares {:?} ({} voxels) but raster holds {} voxels",
                meta.extents,
                n,
                image_bytes.len() / 4
            ),
        ));
    }
    let image: Vec<f32> = image_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(pos) = image.iter().position(|v| !v.is_finite()) {
        return Err(load_err(
            "image.raw",
            format!("non-finite value at voxel {pos}"),
        ));
    }

    let label_bytes = read_raw(dir, LABEL_FILE)?;
    if label_bytes.len() != n {
        return Err(load_err(
            "label.raw",
            format!(
                "extent mismatch: meta declares {:?} ({} voxels) but raster holds {} voxels",
                meta.extents,
                n,
                label_bytes.len()
            ),
        ));
    }

    let image = Array3::from_shape_vec((l, h, w), image).expect("length checked");
    let label = Array3::from_shape_vec((l, h, w), label_bytes).expect("length checked");
    let vol = CtVolume::new(image, meta.spacing_mm, meta.normalized)
        .map_err(|e| load_err("image.raw", e.to_string()))?;
    Ok((vol, LabelVolume::new(label)))
}

/// Writes a volume directory. `roi_slab` defaults to the whole volume.
pub fn save_volume(
    dir: impl AsRef<Path>,
    vol: &CtVolume,
    label: &LabelVolume,
    roi_slab: Option<[usize; 2]>,
) -> Result<()> {
    let dir = dir.as_ref();
    if vol.extents() != label.extents() {
        return Err(Error::shape(
            format!("{:?}", vol.extents()),
            format!("{:?}", label.extents()),
        ));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (l, h, w) = vol.extents();
    let meta = VolumeMeta {
        extents: [l, h, w],
        spacing_mm: vol.spacing_mm(),
        dtype: "f32".into(),
        roi_slab: roi_slab.unwrap_or([0, l]),
        normalized: vol.is_normalized(),
    };
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
        .map_err(|e| Error::io(&meta_path, e))?;

    let mut bytes = Vec::with_capacity(l * h * w * 4);
    for v in vol.data().iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let image_path = dir.join(IMAGE_FILE);
    fs::write(&image_path, bytes).map_err(|e| Error::io(&image_path, e))?;
    let label_path = dir.join(LABEL_FILE);
    let labels: Vec<u8> = label.data().iter().copied().collect();
    fs::write(&label_path, labels).map_err(|e| Error::io(&label_path, e))?;
    Ok(())
}

/// Clamps to `[lo, hi]` HU and maps affinely onto `[0, 1]`.
pub fn truncate_and_normalize(vol: &CtVolume, lo: f32, hi: f32) -> Result<CtVolume> {
    if !(lo < hi) {
        return Err(Error::param(
            "lo/hi",
            format!("window requires lo < hi, got [{lo}, {hi}]"),
        ));
    }
    if vol.is_normalized() {
        return Err(Error::param("vol", "volume is already normalized"));
    }
    let range = hi - lo;
    let data = vol
        .data()
        .mapv(|v| ((v.clamp(lo, hi) - lo) / range).clamp(0.0, 1.0));
    CtVolume::new(data, vol.spacing_mm(), true)
}

/// 8-connected component labeling of a binary slice. Components are numbered
/// from 1 in row-major order of their first pixel.
pub fn label_components_2d(label_slice: ArrayView2<'_, u8>) -> (Array2<u32>, usize) {
    let (h, w) = label_slice.dim();
    let mut ids = Array2::<u32>::zeros((h, w));
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if label_slice[[r, c]] == 0 || ids[[r, c]] != 0 {
                continue;
            }
            count += 1;
            ids[[r, c]] = count;
            queue.push_back((r, c));
            while let Some((pr, pc)) = queue.pop_front() {
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let nr = pr as i64 + dr;
                        let nc = pc as i64 + dc;
                        if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if label_slice[[nr, nc]] != 0 && ids[[nr, nc]] == 0 {
                            ids[[nr, nc]] = count;
                            queue.push_back((nr, nc));
                        }
                    }
                }
            }
        }
    }
    (ids, count as usize)
}

/// Tight half-open box of every id `1..=count` in a component raster.
pub fn component_boxes(ids: ArrayView2<'_, u32>, count: usize) -> Vec<Option<BBox>> {
    let mut ext = vec![None::<(usize, usize, usize, usize)>; count];
    for ((r, c), &id) in ids.indexed_iter() {
        if id == 0 || id as usize > count {
            continue;
        }
        let e = &mut ext[id as usize - 1];
        *e = Some(match *e {
            None => (r, r, c, c),
            Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
        });
    }
    ext.into_iter()
        .map(|b| {
            b.map(|(r0, r1, c0, c1)| {
                BBox::new(c0 as f32, r0 as f32, (c1 + 1) as f32, (r1 + 1) as f32)
            })
        })
        .collect()
}

/// One tight box per 8-connected foreground component, ordered by the
/// row-major position of each component's first pixel. `component_id` is the
/// position in that order.
pub fn boxes_from_mask(label_slice: ArrayView2<'_, u8>, slice_index: usize) -> Vec<GtBox> {
    let (ids, count) = label_components_2d(label_slice);
    component_boxes(ids.view(), count)
        .into_iter()
        .enumerate()
        .map(|(component_id, b)| GtBox {
            bbox: b.expect("every labeled component has a pixel"),
            slice_index,
            component_id,
        })
        .collect()
}

/// 26-connected component labeling of a binary volume.
///
/// Returns the label raster (0 = background, components numbered from 1 in
/// scan order) and the component count.
pub fn label_components_3d(label: &Array3<u8>) -> (Array3<u32>, usize) {
    let (l, h, w) = label.dim();
    let mut ids = Array3::<u32>::zeros((l, h, w));
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for z in 0..l {
        for y in 0..h {
            for x in 0..w {
                if label[[z, y, x]] == 0 || ids[[z, y, x]] != 0 {
                    continue;
                }
                count += 1;
                ids[[z, y, x]] = count;
                queue.push_back((z, y, x));
                while let Some((pz, py, px)) = queue.pop_front() {
                    for dz in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let (nz, ny, nx) = (pz as i64 + dz, py as i64 + dy, px as i64 + dx);
                                if nz < 0
                                    || ny < 0
                                    || nx < 0
                                    || nz >= l as i64
                                    || ny >= h as i64
                                    || nx >= w as i64
                                {
                                    continue;
                                }
                                let n = (nz as usize, ny as usize, nx as usize);
                                if label[[n.0, n.1, n.2]] != 0 && ids[[n.0, n.1, n.2]] == 0 {
                                    ids[[n.0, n.1, n.2]] = count;
                                    queue.push_back(n);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (ids, count as usize)
}

/// Keeps the slices of the region-of-interest slab `[lo, hi)` as image/label pairs.
pub fn build_slice_pairs(
    vol: &CtVolume,
    label: &LabelVolume,
    roi_slab: [usize; 2],
    volume_id: &str,
) -> Result<Vec<SlicePair>> {
    if !vol.is_normalized() {
        return Err(Error::param(
            "vol",
            "slice pairs require a normalized volume",
        ));
    }
    if vol.extents() != label.extents() {
        return Err(Error::shape(
            format!("{:?}", vol.extents()),
            format!("{:?}", label.extents()),
        ));
    }
    let l = vol.extents().0;
    let [lo, hi] = roi_slab;
    if lo >= hi || hi > l {
        return Err(Error::param(
            "roi_slab",
            format!("[{lo}, {hi}) is outside the volume's {l} slices"),
        ));
    }
    Ok((lo..hi)
        .map(|i| SlicePair {
            image: vol.slice(i).to_owned(),
            label: label.slice(i).to_owned(),
            volume_id: volume_id.to_string(),
            slice_index: i,
        })
        .collect())
}

/// Window of `window_size` slices centered on `center`, replicating edge
/// slices past the volume boundary.
pub fn extract_window(vol: &CtVolume, center: usize, window_size: usize) -> Result<SliceSequence> {
    if window_size == 0 || window_size % 2 == 0 {
        return Err(Error::param(
            "window_size",
            format!("must be odd and >= 1, got {window_size}"),
        ));
    }
    let l = vol.extents().0;
    if center >= l {
        return Err(Error::param(
            "center",
            format!("{center} is outside the volume's {l} slices"),
        ));
    }
    let half = (window_size / 2) as i64;
    let mut slices = Vec::with_capacity(window_size);
    let mut source_indices = Vec::with_capacity(window_size);
    let mut pad_mask = Vec::with_capacity(window_size);
    for offset in -half..=half {
        let want = center as i64 + offset;
        let src = want.clamp(0, l as i64 - 1) as usize;
        pad_mask.push(want != src as i64);
        source_indices.push(src);
        slices.push(vol.slice(src).to_owned());
    }
    Ok(SliceSequence {
        slices,
        anchor_slice: center,
        source_indices,
        pad_mask,
    })
}

/// Random volume-level split. The train side gets `round(n * train_fraction)`
/// ids, clamped so both sides are non-empty.
pub fn split_dataset(
    volume_ids: &[String],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::param(
            "train_fraction",
            format!("must be in (0, 1), got {train_fraction}"),
        ));
    }
    if volume_ids.len() < 2 {
        return Err(Error::param(
            "volume_ids",
            "need at least 2 volumes to split",
        ));
    }
    let n = volume_ids.len();
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut shuffled = volume_ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(n_train);
    Ok((shuffled, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub volume_id: String,
    /// Volume directory, relative to the manifest's directory.
    pub path: PathBuf,
    pub split: Split,
}

/// JSON list of volume directories with split tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Resolves an entry's directory against the manifest location.
    pub fn resolve(manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            manifest_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(&entry.path)
        }
    }
}

/// Per-slice 2-D boxes of each 3-D component, keyed by 3-D component id.
///
/// `tracks[k][z]` is the tight box of component `k + 1` on slice `z`, if present.
pub fn component_tracks(label: &LabelVolume) -> Vec<Vec<Option<BBox>>> {
    let (ids, count) = label_components_3d(label.data());
    let per_slice: Vec<Vec<Option<BBox>>> = ids
        .outer_iter()
        .map(|plane| component_boxes(plane, count))
        .collect();
    (0..count)
        .map(|k| per_slice.iter().map(|slice| slice[k]).collect())
        .collect()
}
