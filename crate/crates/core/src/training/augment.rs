//! Paired geometric augmentation (crop, flip) and image-only contrast gain.

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::AugmentConfig;
use crate::error::{Error, Result};

/// A sampled augmentation that can be replayed on any number of rasters of
/// the same extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    /// `(row0, col0, rows, cols)`.
    pub crop: Option<(usize, usize, usize, usize)>,
    pub flip_rows: bool,
    pub flip_cols: bool,
    pub gain: f32,
}

impl Augmentation {
    pub const IDENTITY: Self = Self {
        crop: None,
        flip_rows: false,
        flip_cols: false,
        gain: 1.0,
    };

    pub fn sample(cfg: &AugmentConfig, extents: (usize, usize), seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let crop = if cfg.crop {
            let [ch, cw] = cfg.crop_size;
            if ch > extents.0 || cw > extents.1 {
                return Err(Error::param(
                    "crop_size",
                    format!(
                        "{ch}x{cw} crop is larger than the {}x{} image",
                        extents.0, extents.1
                    ),
                ));
            }
            Some((
                rng.random_range(0..=extents.0 - ch),
                rng.random_range(0..=extents.1 - cw),
                ch,
                cw,
            ))
        } else {
            None
        };
        let (flip_rows, flip_cols) = if cfg.flip {
            (rng.random_bool(0.5), rng.random_bool(0.5))
        } else {
            (false, false)
        };
        let gain = if cfg.contrast {
            rng.random_range(cfg.gain_range.0..=cfg.gain_range.1)
        } else {
            1.0
        };
        Ok(Self {
            crop,
            flip_rows,
            flip_cols,
            gain,
        })
    }

    /// Crop then flip; applied identically to images and labels.
    pub fn geometric<T: Clone>(&self, a: &Array2<T>) -> Array2<T> {
        let mut v = a.view();
        if let Some((r, c, h, w)) = self.crop {
            v = v.slice_move(s![r..r + h, c..c + w]);
        }
        if self.flip_rows {
            v.invert_axis(Axis(0));
        }
        if self.flip_cols {
            v.invert_axis(Axis(1));
        }
        v.to_owned()
    }

    /// Geometric transform plus contrast gain for an image.
    pub fn image(&self, a: &Array2<f32>) -> Array2<f32> {
        adjust_contrast(&self.geometric(a), self.gain)
    }
}

/// Scales intensities about the slice mean by `gain`, clamped to `[0, 1]`.
pub fn adjust_contrast(image: &Array2<f32>, gain: f32) -> Array2<f32> {
    if gain == 1.0 {
        return image.clone();
    }
    let mean = image.mean().unwrap_or(0.0);
    image.mapv(|v| (mean + gain * (v - mean)).clamp(0.0, 1.0))
}

/// Random crop, flips and contrast for one image/label pair.
pub fn augment(
    image: &Array2<f32>,
    label: &Array2<u8>,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(Array2<f32>, Array2<u8>)> {
    if image.dim() != label.dim() {
        return Err(Error::shape(
            format!("{:?}", image.dim()),
            format!("{:?}", label.dim()),
        ));
    }
    let aug = Augmentation::sample(cfg, image.dim(), seed)?;
    Ok((aug.image(image), aug.geometric(label)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> Array2<f32> {
        Array2::from_shape_fn((h, w), |(r, c)| (r * w + c) as f32 / (h * w) as f32)
    }

    #[test]
    fn double_flip_is_identity() {
        let a = ramp(6, 5);
        let aug = Augmentation {
            flip_rows: true,
            flip_cols: true,
            ..Augmentation::IDENTITY
        };
        assert_eq!(aug.geometric(&aug.geometric(&a)), a);
    }

    #[test]
    fn unit_gain_is_identity() {
        let a = ramp(4, 4);
        assert_eq!(adjust_contrast(&a, 1.0), a);
    }

    #[test]
    fn crop_too_large_is_error() {
        let cfg = AugmentConfig {
            crop: true,
            crop_size: [8, 8],
            ..Default::default()
        };
        assert!(augment(&ramp(4, 8), &Array2::zeros((4, 8)), &cfg, 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = AugmentConfig {
            crop: true,
            crop_size: [4, 4],
            ..Default::default()
        };
        let a = ramp(8, 8);
        let l = a.mapv(|v| u8::from(v > 0.5));
        assert_eq!(
            augment(&a, &l, &cfg, 3).unwrap(),
            augment(&a, &l, &cfg, 3).unwrap()
        );
    }

    proptest! {
        #[test]
        fn label_follows_image_geometry(seed in 0u64..500) {
            let cfg = AugmentConfig { crop: true, crop_size: [5, 6], contrast: false, ..Default::default() };
            // Label encodes pixel identity, so the label transform must equal
            // the image transform exactly.
            let img = ramp(9, 10);
            let ids = Array2::from_shape_fn((9, 10), |(r, c)| (r * 10 + c) as u8);
            let (ai, al) = augment(&img, &ids, &cfg, seed).unwrap();
            prop_assert_eq!(ai.dim(), (5, 6));
            for ((r, c), &id) in al.indexed_iter() {
                prop_assert_eq!(ai[[r, c]], img[[id as usize / 10, id as usize % 10]]);
            }
        }

        #[test]
        fn contrast_stays_in_unit_range(gain in 0.5f32..2.0) {
            let out = adjust_contrast(&ramp(7, 7), gain);
            prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
