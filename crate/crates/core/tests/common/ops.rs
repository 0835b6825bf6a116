//! Finite-difference cases for every differentiable graph op.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{away_from_zero, rng, uniform};
use semiseg::gradcheck::check_function;
use semiseg::kernels::{BnRunning, UpsampleMode};
use semiseg::{Graph, Result, Tensor, Var};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-5;

pub type Case = Box<dyn Fn(u64) -> Result<f64>>;

fn unary(op: fn(&mut Graph<f64>, Var) -> Result<Var>, lo: f64, hi: f64, signed: bool) -> Case {
    Box::new(move |seed| {
        let mut r = rng(seed);
        let shape = [r.random_range(1..4), r.random_range(1..4), r.random_range(2..5)];
        let x = if signed {
            away_from_zero(&mut r, shape, lo, hi)
        } else {
            uniform(&mut r, shape, lo, hi)
        };
        check_function(&[x], |g, v| op(g, v[0]), H, seed)
    })
}

fn binary(op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>, b_lo: f64) -> Case {
    Box::new(move |seed| {
        let mut r = rng(seed);
        let shape = [r.random_range(1..4), r.random_range(2..6)];
        let a = uniform(&mut r, shape, -2.0, 2.0);
        let b = away_from_zero(&mut r, shape, b_lo, 2.0);
        check_function(&[a, b], |g, v| op(g, v[0], v[1]), H, seed)
    })
}

fn nchw(r: &mut ChaCha8Rng) -> [usize; 4] {
    [r.random_range(1..3), r.random_range(1..4), r.random_range(2..5), r.random_range(2..5)]
}

fn conv2d(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (cin, cout, k) = (r.random_range(1..4), r.random_range(1..4), [1, 3][r.random_range(0..2)]);
    let (stride, pad) = (r.random_range(1..3), r.random_range(0..2));
    let side = r.random_range(k.max(3)..7);
    let x = uniform(&mut r, [2, cin, side, side], -1.0, 1.0);
    let w = uniform(&mut r, [cout, cin, k, k], -1.0, 1.0);
    let b = uniform(&mut r, [cout], -1.0, 1.0);
    check_function(&[x, w, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad), H, seed)
}

fn batch_norm(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let c = r.random_range(1..4);
    let b = r.random_range(2..4);
    let x = uniform(&mut r, [b, c, 3, 3], -2.0, 2.0);
    let gamma = uniform(&mut r, [c], 0.5, 1.5);
    let beta = uniform(&mut r, [c], -0.5, 0.5);
    check_function(
        &[x, gamma, beta],
        |g, v| {
            let mut running = BnRunning::identity(c);
            g.batch_norm(v[0], v[1], v[2], &mut running, true, 0.1, 1e-5)
        },
        H,
        seed,
    )
}

fn concat(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let [b, c, h, w] = nchw(&mut r);
    let x = uniform(&mut r, [b, c, h, w], -1.0, 1.0);
    let c2 = r.random_range(1..4);
    let y = uniform(&mut r, [b, c2, h, w], -1.0, 1.0);
    check_function(&[x, y], |g, v| g.concat(v[0], v[1]), H, seed)
}

fn upsample(mode: UpsampleMode) -> Case {
    Box::new(move |seed| {
        let mut r = rng(seed);
        let shape = nchw(&mut r);
        let x = uniform(&mut r, shape, -1.0, 1.0);
        check_function(&[x], |g, v| g.upsample2x(v[0], mode), H, seed)
    })
}

fn maxpool(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let [b, c, h, w] = nchw(&mut r);
    let (h, w) = (2 * h, 2 * w);
    // a shuffled ramp keeps every window's maximum unique by 0.01
    let mut vals: Vec<f64> = (0..b * c * h * w).map(|i| 0.01 * i as f64).collect();
    vals.shuffle(&mut r);
    let x = Tensor::new([b, c, h, w], vals)?;
    check_function(&[x], |g, v| g.maxpool2x(v[0]), H, seed)
}

fn select_batch(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let x = uniform(&mut r, [4, 2, 2, 2], -1.0, 1.0);
    let idx: Vec<usize> = (0..3).map(|_| r.random_range(0..4)).collect();
    check_function(&[x], |g, v| g.select_batch(v[0], &idx), H, seed)
}

/// A value read by two consumers must receive both contributions.
fn chain(seed: u64) -> Result<f64> {
    let x = uniform(&mut rng(seed), [2, 3], 0.2, 2.0);
    check_function(
        &[x],
        |g, v| {
            let s = g.sigmoid(v[0])?;
            let l = g.ln(v[0])?;
            let p = g.mul(s, l)?;
            g.div(p, s)
        },
        H,
        seed,
    )
}

/// Every op with its input generator. Inputs avoid kinks by construction:
/// relu and abs stay away from 0, clamp away from its bounds, maxpool
/// windows have a unique maximum.
pub fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("conv2d", Box::new(conv2d)),
        ("batch_norm", Box::new(batch_norm)),
        ("relu", unary(|g, a| g.relu(a), 0.1, 2.0, true)),
        ("sigmoid", unary(|g, a| g.sigmoid(a), -4.0, 4.0, false)),
        ("ln", unary(|g, a| g.ln(a), 0.2, 3.0, false)),
        ("abs", unary(|g, a| g.abs(a), 0.1, 2.0, true)),
        ("one_minus", unary(|g, a| g.one_minus(a), -2.0, 2.0, false)),
        ("affine", unary(|g, a| g.affine(a, -1.7, 0.3), -2.0, 2.0, false)),
        ("clamp outside", unary(|g, a| g.clamp(a, -0.75, 0.75), 0.8, 1.5, true)),
        ("clamp inside", unary(|g, a| g.clamp(a, -1.0, 1.0), 0.0, 0.95, true)),
        ("add", binary(|g, a, b| g.add(a, b), 0.0)),
        ("sub", binary(|g, a, b| g.sub(a, b), 0.0)),
        ("mul", binary(|g, a, b| g.mul(a, b), 0.0)),
        ("div", binary(|g, a, b| g.div(a, b), 0.5)),
        ("concat", Box::new(concat)),
        ("upsample nearest", upsample(UpsampleMode::Nearest)),
        ("upsample bilinear", upsample(UpsampleMode::Bilinear)),
        ("maxpool2x", Box::new(maxpool)),
        ("sum", Box::new(|seed| check_function(&[uniform(&mut rng(seed), [3, 4], -1.0, 1.0)], |g, v| g.sum(v[0]), H, seed))),
        ("mean", Box::new(|seed| check_function(&[uniform(&mut rng(seed), [2, 5], -1.0, 1.0)], |g, v| g.mean(v[0]), H, seed))),
        (
            "batch_sum",
            Box::new(|seed| {
                let mut r = rng(seed);
                let shape = nchw(&mut r);
                let x = uniform(&mut r, shape, -1.0, 1.0);
                check_function(&[x], |g, v| g.batch_sum(v[0]), H, seed)
            }),
        ),
        ("select_batch", Box::new(select_batch)),
        ("chain", Box::new(chain)),
    ]
}

/// Worst relative error of each case over `seeds`.
pub fn worst_errors(seeds: u64) -> Result<Vec<(&'static str, f64)>> {
    cases()
        .into_iter()
        .map(|(name, case)| {
            let mut worst = 0.0f64;
            for seed in 0..seeds {
                worst = worst.max(case(seed)?);
            }
            Ok((name, worst))
        })
        .collect()
}
