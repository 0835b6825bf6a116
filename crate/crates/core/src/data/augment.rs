use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Raster, SegSample};
use crate::error::{Error, Result};

/// Geometric augmentation settings. Images are resampled bilinearly, masks
/// by nearest neighbour so they stay binary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Side every sample is resized to before augmentation.
    pub working_size: usize,
    /// Side of the final random crop; the network input size.
    pub crop_size: usize,
    pub flip_prob: f64,
    /// Random multiple of 90 degrees.
    pub rotate: bool,
    pub zoom_min: f64,
    pub zoom_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::for_input(64)
    }
}

impl AugmentConfig {
    /// Working size 1.25x the crop: 80 -> 64, 320 -> 256.
    pub fn for_input(crop_size: usize) -> Self {
        Self {
            working_size: crop_size * 5 / 4,
            crop_size,
            flip_prob: 0.5,
            rotate: true,
            zoom_min: 0.9,
            zoom_max: 1.1,
        }
    }

    /// Pure resize to the crop size, no randomness.
    pub fn none(size: usize) -> Self {
        Self {
            working_size: size,
            crop_size: size,
            flip_prob: 0.0,
            rotate: false,
            zoom_min: 1.0,
            zoom_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.working_size < self.crop_size {
            return Err(Error::Invalid(format!(
                "working size {} must be >= crop size {} > 0",
                self.working_size, self.crop_size
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || !(self.zoom_min > 0.0 && self.zoom_min <= self.zoom_max) {
            return Err(Error::Invalid("flip_prob must be in [0, 1] and 0 < zoom_min <= zoom_max".into()));
        }
        Ok(())
    }
}

fn resize_pair(image: &Raster, mask: Option<&Raster>, side: usize) -> (Raster, Option<Raster>) {
    let image = if (image.height, image.width) == (side, side) {
        image.clone()
    } else {
        image.resize_bilinear(side, side)
    };
    let mask = mask.map(|m| {
        if (m.height, m.width) == (side, side) {
            m.clone()
        } else {
            m.resize_nearest(side, side)
        }
    });
    (image, mask)
}

/// Resizes to `side x side` without augmentation.
pub fn prepare(sample: &SegSample, side: usize) -> SegSample {
    let (image, mask) = resize_pair(&sample.image, sample.mask.as_ref(), side);
    SegSample {
        id: sample.id.clone(),
        image,
        mask,
        is_labeled: sample.is_labeled,
    }
}

/// Seeded augmentation: resize, flips, right-angle rotation, zoom, random
/// crop. Image and mask receive the same geometry.
pub fn augment(sample: &SegSample, cfg: &AugmentConfig, seed: u64) -> Result<SegSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut image, mut mask) = resize_pair(&sample.image, sample.mask.as_ref(), cfg.working_size);

    let mut apply = |f: &dyn Fn(&Raster) -> Raster| {
        image = f(&image);
        mask = mask.as_ref().map(f);
    };
    if rng.random_bool(cfg.flip_prob) {
        apply(&Raster::flip_horizontal);
    }
    if rng.random_bool(cfg.flip_prob) {
        apply(&Raster::flip_vertical);
    }
    if cfg.rotate {
        let turns = rng.random_range(0..4u32);
        apply(&|r: &Raster| r.rotate90(turns));
    }
    let zoom = if cfg.zoom_max > cfg.zoom_min {
        rng.random_range(cfg.zoom_min..=cfg.zoom_max)
    } else {
        cfg.zoom_min
    };
    let side = ((cfg.working_size as f64 * zoom).round() as usize).max(cfg.crop_size);
    let (image, mask) = resize_pair(&image, mask.as_ref(), side);
    let top = rng.random_range(0..=side - cfg.crop_size);
    let left = rng.random_range(0..=side - cfg.crop_size);
    let c = cfg.crop_size;
    Ok(SegSample {
        id: sample.id.clone(),
        image: image.crop(top, left, c, c)?,
        mask: mask.map(|m| m.crop(top, left, c, c)).transpose()?,
        is_labeled: sample.is_labeled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_sample(side: usize) -> SegSample {
        let mask: Vec<f32> = (0..side * side)
            .map(|i| {
                let (y, x) = ((i / side) as f32, (i % side) as f32);
                let d = (y - side as f32 * 0.3).powi(2) + (x - side as f32 * 0.6).powi(2);
                (d < (side as f32 * 0.2).powi(2)) as u8 as f32
            })
            .collect();
        let image = mask.iter().flat_map(|&m| [m, 0.5, 1.0 - m]).collect();
        SegSample {
            id: "blob".into(),
            image: Raster::new(side, side, 3, image).unwrap(),
            mask: Some(Raster::new(side, side, 1, mask).unwrap()),
            is_labeled: true,
        }
    }

    #[test]
    fn mask_stays_binary_and_sized() {
        let s = blob_sample(50);
        for seed in 0..20 {
            let a = augment(&s, &AugmentConfig::for_input(32), seed).unwrap();
            a.validate().unwrap();
            assert_eq!((a.image.height, a.image.width), (32, 32));
        }
    }

    #[test]
    fn pure_geometry_keeps_image_and_mask_in_sync() {
        let s = blob_sample(32);
        let cfg = AugmentConfig {
            zoom_min: 1.0,
            zoom_max: 1.0,
            ..AugmentConfig::none(32)
        };
        let cfg = AugmentConfig {
            flip_prob: 0.5,
            rotate: true,
            ..cfg
        };
        for seed in 0..16 {
            let a = augment(&s, &cfg, seed).unwrap();
            let m = a.mask.as_ref().unwrap();
            for i in 0..32 * 32 {
                assert_eq!(a.image.data[3 * i], m.data[i]);
            }
            assert_eq!(a.foreground_pixels(), s.foreground_pixels());
        }
    }

    #[test]
    fn zoomed_crops_stay_aligned() {
        let s = blob_sample(64);
        for seed in 0..8 {
            let a = augment(&s, &AugmentConfig::for_input(64), seed).unwrap();
            let m = a.mask.as_ref().unwrap();
            let agree = (0..64 * 64)
                .filter(|&i| (a.image.data[3 * i] >= 0.5) == (m.data[i] == 1.0))
                .count();
            assert!(agree as f64 / 4096.0 > 0.97, "seed {seed}: {agree}");
        }
    }

    #[test]
    fn same_seed_same_result() {
        let s = blob_sample(40);
        let cfg = AugmentConfig::for_input(32);
        assert_eq!(augment(&s, &cfg, 7).unwrap(), augment(&s, &cfg, 7).unwrap());
    }
}
