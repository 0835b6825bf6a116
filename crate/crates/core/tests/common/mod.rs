#![allow(dead_code)]

pub mod gff_oracle;
pub mod ops;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semiseg::data::{prepare, synthesize, SegSample, SyntheticSpec};
use semiseg::{ArchConfig, Element, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Element>(rng: &mut ChaCha8Rng, shape: impl Into<Vec<usize>>, lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(lo..hi)))
}

/// Uniform magnitudes in `[lo, hi)` with random sign, so no value sits near 0.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: impl Into<Vec<usize>>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.random_range(lo..hi);
        if rng.random_bool(0.5) { v } else { -v }
    })
}

pub fn binary_mask<T: Element>(rng: &mut ChaCha8Rng, shape: impl Into<Vec<usize>>, p: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| if rng.random_bool(p) { T::one() } else { T::zero() })
}

/// Four-wide network at 16x16 input: small enough for finite differences.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        stage_widths: [4, 4, 4, 4, 4],
        input_size: 16,
        ..ArchConfig::toy()
    }
}

pub fn small_arch(size: usize) -> ArchConfig {
    ArchConfig {
        stage_widths: [8, 16, 32, 64, 64],
        input_size: size,
        ..ArchConfig::toy()
    }
}

/// `n` synthetic samples rendered at 32x32 and resized to `side`.
pub fn samples(n: u64, seed: u64, side: usize) -> Vec<SegSample> {
    let spec = SyntheticSpec::new(32);
    (0..n).map(|i| prepare(&synthesize(&spec, seed, i), side)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct nested-loop cross-correlation with zero padding.
pub fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (n, cin, h, w) = x.dims4().unwrap();
    let (cout, _, kk, _) = k.dims4().unwrap();
    let ho = (h + 2 * pad - kk) / stride + 1;
    let wo = (w + 2 * pad - kk) / stride + 1;
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    for bi in 0..n {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for ky in 0..kk {
                            for kx in 0..kk {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * cin + c) * h + iy as usize) * w + ix as usize];
                                acc += xv * k.data()[((o * cin + c) * kk + ky) * kk + kx];
                            }
                        }
                    }
                    out.data_mut()[((bi * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}
