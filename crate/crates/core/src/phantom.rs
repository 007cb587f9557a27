//! Synthetic volumes: small irregular low-contrast blobs in a textured
//! background, with optional unlabeled tube-shaped distractors that look like
//! targets on any single slice but run through the whole stack.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{
    save_volume, split_dataset, CtVolume, LabelVolume, Manifest, ManifestEntry, Split,
};

pub const CONFIG_FILE: &str = "phantom_config.json";
pub const MANIFEST_FILE: &str = "manifest.json";

const MAX_PLACEMENT_RETRIES: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    /// `[L, H, W]`.
    pub extents: [usize; 3],
    pub spacing_mm: [f32; 3],
    pub n_targets_range: (usize, usize),
    pub target_voxels_range: (usize, usize),
    pub max_target_voxels: usize,
    pub contrast_delta: f32,
    pub noise_sigma: f32,
    pub shape_irregularity: f32,
    pub n_distractors_range: (usize, usize),
    pub distractor_radius_range: (f32, f32),
    pub background_mean: f32,
    pub background_amplitude: f32,
    /// Smallest detector window the volumes must support.
    pub window_size: usize,
    pub train_fraction: f64,
    /// Slices kept on either side of the labeled z-range in each volume's
    /// region-of-interest slab.
    pub roi_margin: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            extents: [24, 64, 64],
            spacing_mm: [0.625, 0.625, 0.625],
            n_targets_range: (1, 3),
            target_voxels_range: (200, 1600),
            max_target_voxels: 4096,
            contrast_delta: 0.15,
            noise_sigma: 0.05,
            shape_irregularity: 0.3,
            n_distractors_range: (0, 2),
            distractor_radius_range: (1.8, 3.0),
            background_mean: 0.45,
            background_amplitude: 0.12,
            window_size: 9,
            train_fraction: 0.8,
            roi_margin: 2,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let [l, h, w] = self.extents;
        if l < self.window_size.max(2) || h < 32 || w < 32 {
            return Err(Error::param(
                "extents",
                format!(
                    "need at least ({}, 32, 32), got {:?}",
                    self.window_size.max(2),
                    self.extents
                ),
            ));
        }
        let (tmin, tmax) = self.n_targets_range;
        if tmin > tmax {
            return Err(Error::param("n_targets_range", "min > max"));
        }
        let (vmin, vmax) = self.target_voxels_range;
        if vmin < 8 || vmin > vmax || vmax > self.max_target_voxels {
            return Err(Error::param(
                "target_voxels_range",
                format!(
                    "need 8 <= min <= max <= {}, got ({vmin}, {vmax})",
                    self.max_target_voxels
                ),
            ));
        }
        if !(self.contrast_delta > 0.0) {
            return Err(Error::param("contrast_delta", "must be > 0"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::param("noise_sigma", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.shape_irregularity) {
            return Err(Error::param("shape_irregularity", "must be in [0, 1]"));
        }
        if self.n_distractors_range.0 > self.n_distractors_range.1 {
            return Err(Error::param("n_distractors_range", "min > max"));
        }
        let (rmin, rmax) = self.distractor_radius_range;
        if !(rmin > 0.0 && rmin <= rmax) {
            return Err(Error::param(
                "distractor_radius_range",
                "need 0 < min <= max",
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::param("train_fraction", "must be in (0, 1)"));
        }
        Ok(())
    }
}

/// Octave-summed value noise on a 3-D lattice, roughly in `[-1, 1]`.
struct ValueNoise {
    lattice: Vec<Array3<f32>>,
    cells: Vec<[f32; 3]>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, extents: [usize; 3], octaves: usize) -> Self {
        let mut lattice = Vec::with_capacity(octaves);
        let mut cells = Vec::with_capacity(octaves);
        let mut cell = [8.0f32, 16.0, 16.0];
        for _ in 0..octaves {
            let dims = (
                (extents[0] as f32 / cell[0]).ceil() as usize + 2,
                (extents[1] as f32 / cell[1]).ceil() as usize + 2,
                (extents[2] as f32 / cell[2]).ceil() as usize + 2,
            );
            lattice.push(Array3::from_shape_simple_fn(dims, || {
                rng.random_range(-1.0f32..1.0)
            }));
            cells.push(cell);
            cell = cell.map(|c| (c / 2.0).max(2.0));
        }
        Self { lattice, cells }
    }

    fn sample(&self, z: usize, y: usize, x: usize) -> f32 {
        fn fade(t: f32) -> f32 {
            t * t * (3.0 - 2.0 * t)
        }
        let mut total = 0.0;
        let mut amp = 1.0;
        let mut norm = 0.0;
        for (grid, cell) in self.lattice.iter().zip(&self.cells) {
            let p = [z as f32 / cell[0], y as f32 / cell[1], x as f32 / cell[2]];
            let i = p.map(|v| v.floor() as usize);
            let f = [fade(p[0].fract()), fade(p[1].fract()), fade(p[2].fract())];
            let mut acc = 0.0;
            for dz in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let wz = if dz == 0 { 1.0 - f[0] } else { f[0] };
                        let wy = if dy == 0 { 1.0 - f[1] } else { f[1] };
                        let wx = if dx == 0 { 1.0 - f[2] } else { f[2] };
                        acc += wz * wy * wx * grid[[i[0] + dz, i[1] + dy, i[2] + dx]];
                    }
                }
            }
            total += amp * acc;
            norm += amp;
            amp *= 0.5;
        }
        total / norm
    }
}

/// Radially perturbed ellipsoid rasterized to exactly `voxels` voxels: the
/// `voxels` positions with the smallest perturbed normalized radius.
fn rasterize_target(
    rng: &mut ChaCha8Rng,
    extents: [usize; 3],
    voxels: usize,
    irregularity: f32,
) -> Vec<[usize; 3]> {
    let radii = [
        rng.random_range(0.8f32..1.5),
        rng.random_range(0.75f32..1.25),
        rng.random_range(0.75f32..1.25),
    ];
    let scale =
        (3.0 * voxels as f32 / (4.0 * std::f32::consts::PI * radii.iter().product::<f32>())).cbrt();
    let half = radii.map(|r| (r * scale * (1.0 + irregularity) * 1.6).ceil() as i64 + 1);
    let center = [0, 1, 2].map(|a| {
        let lo = half[a].min(extents[a] as i64 / 2);
        let hi = (extents[a] as i64 - 1 - half[a]).max(lo);
        rng.random_range(lo..=hi) as f32 + rng.random_range(-0.5f32..0.5)
    });
    // Low-order angular perturbation: a few random plane waves over the direction.
    let waves: Vec<([f32; 3], f32, f32, f32)> = (0..4)
        .map(|_| {
            let mut d = [0f32; 3].map(|_| rng.random_range(-1.0f32..1.0));
            let n = d.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-3);
            d = d.map(|v| v / n);
            (
                d,
                rng.random_range(1.0f32..3.0),
                rng.random_range(0.0f32..6.283),
                rng.random_range(0.3f32..1.0),
            )
        })
        .collect();
    let wave_norm: f32 = waves.iter().map(|w| w.3).sum();

    let mut scored = Vec::new();
    for z in (center[0] as i64 - half[0])..=(center[0] as i64 + half[0]) {
        for y in (center[1] as i64 - half[1])..=(center[1] as i64 + half[1]) {
            for x in (center[2] as i64 - half[2])..=(center[2] as i64 + half[2]) {
                if z < 0
                    || y < 0
                    || x < 0
                    || z >= extents[0] as i64
                    || y >= extents[1] as i64
                    || x >= extents[2] as i64
                {
                    continue;
                }
                let q = [
                    (z as f32 - center[0]) / (radii[0] * scale),
                    (y as f32 - center[1]) / (radii[1] * scale),
                    (x as f32 - center[2]) / (radii[2] * scale),
                ];
                let r = q.iter().map(|v| v * v).sum::<f32>().sqrt();
                let dir = if r > 1e-6 {
                    q.map(|v| v / r)
                } else {
                    [1.0, 0.0, 0.0]
                };
                let bump: f32 = waves
                    .iter()
                    .map(|(d, freq, phase, amp)| {
                        let t = d[0] * dir[0] + d[1] * dir[1] + d[2] * dir[2];
                        amp * (freq * std::f32::consts::PI * t + phase).cos()
                    })
                    .sum::<f32>()
                    / wave_norm;
                let rho = r / (1.0 + irregularity * bump).max(0.2);
                scored.push((rho, [z as usize, y as usize, x as usize]));
            }
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(voxels);
    scored.into_iter().map(|(_, p)| p).collect()
}

fn touches(occupied: &Array3<u8>, voxels: &[[usize; 3]], gap: i64) -> bool {
    let (l, h, w) = occupied.dim();
    voxels.iter().any(|p| {
        for dz in -gap..=gap {
            for dy in -gap..=gap {
                for dx in -gap..=gap {
                    let (z, y, x) = (p[0] as i64 + dz, p[1] as i64 + dy, p[2] as i64 + dx);
                    if z >= 0
                        && y >= 0
                        && x >= 0
                        && z < l as i64
                        && y < h as i64
                        && x < w as i64
                        && occupied[[z as usize, y as usize, x as usize]] != 0
                    {
                        return true;
                    }
                }
            }
        }
        false
    })
}

fn tube_voxels(
    rng: &mut ChaCha8Rng,
    extents: [usize; 3],
    radius_range: (f32, f32),
) -> Vec<[usize; 3]> {
    let [l, h, w] = extents;
    let radius = rng.random_range(radius_range.0..=radius_range.1);
    let margin = radius + 2.0;
    let mut cy = rng.random_range(margin..h as f32 - margin);
    let mut cx = rng.random_range(margin..w as f32 - margin);
    let (vy, vx) = (
        rng.random_range(-0.3f32..0.3),
        rng.random_range(-0.3f32..0.3),
    );
    let mut out = Vec::new();
    for z in 0..l {
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
                if dy * dy + dx * dx <= radius * radius {
                    out.push([z, y, x]);
                }
            }
        }
        cy = (cy + vy).clamp(margin, h as f32 - margin);
        cx = (cx + vx).clamp(margin, w as f32 - margin);
    }
    out
}

/// Generates one normalized phantom volume and its label.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(CtVolume, LabelVolume)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let extents = cfg.extents;
    let [l, h, w] = extents;

    let mut label = Array3::<u8>::zeros((l, h, w));
    let mut occupied = Array3::<u8>::zeros((l, h, w));
    let n_targets = rng.random_range(cfg.n_targets_range.0..=cfg.n_targets_range.1);
    for t in 0..n_targets {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_RETRIES {
            let voxels = rng.random_range(cfg.target_voxels_range.0..=cfg.target_voxels_range.1);
            let shape = rasterize_target(&mut rng, extents, voxels, cfg.shape_irregularity);
            let z_span = shape.iter().map(|p| p[0]).max().unwrap_or(0)
                - shape.iter().map(|p| p[0]).min().unwrap_or(0);
            if shape.len() != voxels || z_span < 1 || touches(&occupied, &shape, 2) {
                continue;
            }
            // The smallest-radius level set must also be one 26-connected piece.
            let mut probe = Array3::<u8>::zeros((l, h, w));
            for p in &shape {
                probe[[p[0], p[1], p[2]]] = 1;
            }
            if crate::volume::label_components_3d(&probe).1 != 1 {
                continue;
            }
            for p in &shape {
                label[[p[0], p[1], p[2]]] = 1;
                occupied[[p[0], p[1], p[2]]] = 1;
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place target {} of {n_targets} without overlap after {MAX_PLACEMENT_RETRIES} attempts",
                t + 1
            )));
        }
    }

    let mut distractor = Array3::<u8>::zeros((l, h, w));
    let n_distractors = rng.random_range(cfg.n_distractors_range.0..=cfg.n_distractors_range.1);
    for _ in 0..n_distractors {
        for _ in 0..MAX_PLACEMENT_RETRIES {
            let tube = tube_voxels(&mut rng, extents, cfg.distractor_radius_range);
            if touches(&occupied, &tube, 2) {
                continue;
            }
            for p in &tube {
                distractor[[p[0], p[1], p[2]]] = 1;
                occupied[[p[0], p[1], p[2]]] = 1;
            }
            break;
        }
    }

    let noise_field = ValueNoise::new(&mut rng, extents, 3);
    let gaussian = Normal::new(0.0f32, cfg.noise_sigma.max(0.0))
        .map_err(|e| Error::Generation(e.to_string()))?;
    let mut data = Array3::<f32>::zeros((l, h, w));
    for ((z, y, x), v) in data.indexed_iter_mut() {
        let mut value =
            cfg.background_mean + cfg.background_amplitude * noise_field.sample(z, y, x);
        if label[[z, y, x]] != 0 || distractor[[z, y, x]] != 0 {
            value += cfg.contrast_delta;
        }
        if cfg.noise_sigma > 0.0 {
            value += gaussian.sample(&mut rng);
        }
        *v = value.clamp(0.0, 1.0);
    }
    Ok((
        CtVolume::new(data, cfg.spacing_mm, true)?,
        LabelVolume::new(label),
    ))
}

/// Labeled z-range widened by `margin` on both sides; the whole volume when
/// nothing is labeled.
pub fn roi_slab_for(label: &LabelVolume, margin: usize) -> [usize; 2] {
    let l = label.extents().0;
    let labeled: Vec<usize> = (0..l)
        .filter(|&z| label.slice(z).iter().any(|&v| v != 0))
        .collect();
    match (labeled.first(), labeled.last()) {
        (Some(&lo), Some(&hi)) => [lo.saturating_sub(margin), (hi + 1 + margin).min(l)],
        _ => [0, l],
    }
}

/// Writes `n_volumes` phantom directories, the config, and a split-tagged
/// manifest under `out_dir`. Volume `i` uses seed `cfg.seed + i`.
pub fn generate_dataset(
    cfg: &PhantomConfig,
    n_volumes: usize,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ids: Vec<String> = (0..n_volumes).map(|i| format!("vol_{i:04}")).collect();
    let (train, _) = if n_volumes >= 2 {
        split_dataset(&ids, cfg.train_fraction, cfg.seed)?
    } else {
        (ids.clone(), Vec::new())
    };

    let mut entries = Vec::with_capacity(n_volumes);
    for (i, id) in ids.iter().enumerate() {
        let vcfg = PhantomConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        let (vol, label) = generate_phantom(&vcfg)?;
        save_volume(
            out_dir.join(id),
            &vol,
            &label,
            Some(roi_slab_for(&label, cfg.roi_margin)),
        )?;
        entries.push(ManifestEntry {
            volume_id: id.clone(),
            path: PathBuf::from(id),
            split: if train.contains(id) {
                Split::Train
            } else {
                Split::Test
            },
        });
    }
    let config_path = out_dir.join(CONFIG_FILE);
    fs::write(&config_path, serde_json::to_string_pretty(cfg)?)
        .map_err(|e| Error::io(&config_path, e))?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    Manifest { entries }.write(&manifest_path)?;
    Ok(manifest_path)
}
