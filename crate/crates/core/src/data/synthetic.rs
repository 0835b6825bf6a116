//! Synthetic "lesion" images: a smooth textured background with one to three
//! irregular blobs that differ in colour and texture, plus small specular
//! distractors and pixel noise. Blob masks are exact ground truth.

use std::f32::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{save_sample, split, write_splits, Raster, SegSample, SplitSpec};
use crate::error::{io_err, Error, Result};

/// Appearance ranges of generated images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub size: usize,
    /// Minimum and maximum fraction of the image covered by lesions.
    pub area_range: (f64, f64),
    /// Range of the lesion colour shift magnitude.
    pub contrast_range: (f32, f32),
    /// Range of the per-image Gaussian noise standard deviation.
    pub noise_range: (f32, f32),
    /// Up to this many bright spots outside the lesions.
    pub max_distractors: usize,
}

impl SyntheticSpec {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            area_range: (0.02, 0.30),
            contrast_range: (0.10, 0.25),
            noise_range: (0.02, 0.05),
            max_distractors: 2,
        }
    }
}

struct Wave {
    fx: f32,
    fy: f32,
    phase: f32,
    amp: f32,
}

impl Wave {
    fn random(rng: &mut ChaCha8Rng, freq: (f32, f32), amp: (f32, f32)) -> Self {
        let angle = rng.random_range(0.0..TAU);
        let f = rng.random_range(freq.0..freq.1);
        Self {
            fx: f * angle.cos(),
            fy: f * angle.sin(),
            phase: rng.random_range(0.0..TAU),
            amp: rng.random_range(amp.0..amp.1),
        }
    }

    /// `u`, `v` are normalized coordinates in `[0, 1)`.
    fn at(&self, u: f32, v: f32) -> f32 {
        self.amp * (TAU * (self.fx * u + self.fy * v) + self.phase).sin()
    }
}

struct Blob {
    cy: f32,
    cx: f32,
    radius: f32,
    harmonics: [(f32, f32); 3],
}

impl Blob {
    fn boundary(&self, theta: f32) -> f32 {
        let wobble: f32 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(k, &(a, p))| a * ((k as f32 + 2.0) * theta + p).cos())
            .sum();
        self.radius * (1.0 + wobble)
    }

    /// Signed distance proxy: positive inside, in pixels.
    fn inside(&self, y: f32, x: f32) -> f32 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        self.boundary(dy.atan2(dx)) - (dy * dy + dx * dx).sqrt()
    }
}

fn random_blobs(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Vec<Blob> {
    let n = spec.size as f32;
    let count = rng.random_range(1..=3usize);
    let total = rng.random_range(spec.area_range.0 * 1.5..spec.area_range.1 * 0.75) as f32;
    let weights: Vec<f32> = (0..count).map(|_| rng.random_range(0.5..1.5)).collect();
    let wsum: f32 = weights.iter().sum();
    weights
        .iter()
        .map(|w| {
            let area = total * w / wsum * n * n;
            let radius = (area / std::f32::consts::PI).sqrt().max(1.5);
            let margin = radius.min(n / 2.0 - 1.0);
            Blob {
                cy: rng.random_range(margin..n - margin),
                cx: rng.random_range(margin..n - margin),
                radius,
                harmonics: [(); 3].map(|_| (rng.random_range(0.0..0.18), rng.random_range(0.0..TAU))),
            }
        })
        .collect()
}

/// Generates sample `index` of the stream defined by `seed`.
pub fn synthesize(spec: &SyntheticSpec, seed: u64, index: u64) -> SegSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n = spec.size;
    let nf = n as f32;

    // Lesion layout, retried until the covered area is in range.
    let (blobs, mask) = loop {
        let blobs = random_blobs(&mut rng, spec);
        let mask: Vec<f32> = (0..n * n)
            .map(|i| {
                let (y, x) = ((i / n) as f32 + 0.5, (i % n) as f32 + 0.5);
                let hit = blobs.iter().any(|b| b.inside(y, x) >= 0.0);
                if hit {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let frac = mask.iter().sum::<f32>() as f64 / (n * n) as f64;
        if frac >= spec.area_range.0 && frac <= spec.area_range.1 {
            break (blobs, mask);
        }
    };

    let base = [
        rng.random_range(0.45..0.75f32),
        rng.random_range(0.25..0.45f32),
        rng.random_range(0.20..0.40f32),
    ];
    let gains: [f32; 3] = [(); 3].map(|_| rng.random_range(0.7..1.3));
    let background: Vec<Wave> = (0..3).map(|_| Wave::random(&mut rng, (0.5, 2.0), (0.03, 0.08))).collect();

    let contrast = rng.random_range(spec.contrast_range.0..spec.contrast_range.1);
    let mut hue = [
        rng.random_range(0.5..1.0f32),
        rng.random_range(0.3..1.0f32),
        rng.random_range(-0.2..0.5f32),
    ];
    let norm = hue.iter().map(|h| h * h).sum::<f32>().sqrt();
    hue.iter_mut().for_each(|h| *h *= contrast / norm);
    let texture: Vec<Wave> = (0..2).map(|_| Wave::random(&mut rng, (5.0, 9.0), (0.02, 0.06))).collect();

    let spots: Vec<(f32, f32, f32)> = (0..rng.random_range(0..=spec.max_distractors))
        .map(|_| {
            (
                rng.random_range(0.0..nf),
                rng.random_range(0.0..nf),
                rng.random_range(1.0..nf / 20.0 + 1.5),
            )
        })
        .collect();

    let noise = Normal::new(0.0f32, rng.random_range(spec.noise_range.0..spec.noise_range.1))
        .expect("positive std");

    let mut image = vec![0.0f32; n * n * 3];
    for i in 0..n * n {
        let (y, x) = ((i / n) as f32 + 0.5, (i % n) as f32 + 0.5);
        let (u, v) = (x / nf, y / nf);
        let field: f32 = background.iter().map(|w| w.at(u, v)).sum();
        let alpha = blobs
            .iter()
            .map(|b| (0.5 + b.inside(y, x) / 1.5).clamp(0.0, 1.0))
            .fold(0.0f32, f32::max);
        let tex: f32 = texture.iter().map(|w| w.at(u, v)).sum();
        let spot = spots
            .iter()
            .map(|&(sy, sx, r)| {
                let d2 = (y - sy).powi(2) + (x - sx).powi(2);
                0.35 * (-d2 / (r * r)).exp()
            })
            .fold(0.0f32, f32::max)
            * (1.0 - alpha);
        for c in 0..3 {
            let bg = base[c] + gains[c] * field;
            let lesion = bg + hue[c] + tex;
            let value = bg * (1.0 - alpha) + lesion * alpha + spot + noise.sample(&mut rng);
            // quantize so the in-memory sample equals its PNG
            image[3 * i + c] = (value.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    SegSample {
        id: format!("synth_{index:05}"),
        image: Raster::new(n, n, 3, image).expect("sized above"),
        mask: Some(Raster::new(n, n, 1, mask).expect("sized above")),
        is_labeled: true,
    }
}

/// Writes `n` synthetic samples plus a default `splits.json` to `out_dir`.
pub fn generate_synthetic(n: usize, size: usize, seed: u64, out_dir: &Path) -> Result<Vec<SegSample>> {
    if n == 0 {
        return Err(Error::Invalid("need at least one sample".into()));
    }
    if size < 32 {
        return Err(Error::Invalid(format!("image size {size} below the minimum of 32")));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let spec = SyntheticSpec::new(size);
    let samples: Vec<SegSample> = (0..n as u64).map(|i| synthesize(&spec, seed, i)).collect();
    for s in &samples {
        save_sample(out_dir, s)?;
    }
    // Tiny datasets cannot fill every split; put everything in training then.
    let parts = split(&samples, &SplitSpec { seed, ..Default::default() }).or_else(|_| {
        split(
            &samples,
            &SplitSpec {
                seed,
                labeled_ratio: 1.0,
                train: 1.0,
                val: 0.0,
                test: 0.0,
            },
        )
    })?;
    write_splits(out_dir, &parts.ids())?;
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn areas_within_range_and_deterministic() {
        let spec = SyntheticSpec::new(48);
        for i in 0..30 {
            let s = synthesize(&spec, 11, i);
            let frac = s.foreground_pixels() as f64 / (48.0 * 48.0);
            assert!((0.02..=0.30).contains(&frac), "sample {i}: {frac}");
            assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s, synthesize(&spec, 11, i));
        }
        assert_ne!(synthesize(&spec, 11, 0), synthesize(&spec, 12, 0));
    }

    #[test]
    fn lesions_differ_from_background() {
        let spec = SyntheticSpec::new(64);
        let s = synthesize(&spec, 2, 0);
        let m = s.mask.as_ref().unwrap();
        let mean = |inside: bool| {
            let px: Vec<usize> = (0..64 * 64).filter(|&i| (m.data[i] == 1.0) == inside).collect();
            px.iter().map(|&i| s.image.data[3 * i]).sum::<f32>() / px.len() as f32
        };
        assert!(mean(true) > mean(false));
    }
}
