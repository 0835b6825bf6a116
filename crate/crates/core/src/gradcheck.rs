//! Central finite-difference checks of analytic gradients.
//!
//! Errors are normwise: `max |analytic - numeric| / max(max |analytic|,
//! max |numeric|, floor)` over the checked coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::NetworkParams;
use crate::nn::ParamKind;
use crate::pipeline::BinarizePolicy;
use crate::tensor::{Element, Tensor};
use crate::trainer::loss_and_grads;

/// Normwise relative error; `floor` guards all-zero gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(floor, f64::max);
    diff / scale
}

/// Checks every input of a graph function.
///
/// `build` maps leaves to an output of any shape; the checked scalar is
/// `sum(output * R)` for a fixed random `R`, which exercises every output
/// element. Returns the worst relative error over inputs.
pub fn check_function(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    h: f64,
    seed: u64,
) -> Result<f64> {
    let mut weights: Option<Tensor<f64>> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut eval = |inputs: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars = inputs
            .iter()
            .map(|t| g.leaf(t.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &vars)?;
        let shape = g.value(out).shape().to_vec();
        let w = weights
            .get_or_insert_with(|| Tensor::from_fn(shape.clone(), |_| rng.random_range(-1.0..1.0)))
            .clone();
        if w.shape() != shape.as_slice() {
            return Err(Error::Invalid("output shape changed between evaluations".into()));
        }
        let w = g.constant(w)?;
        let weighted = g.mul(out, w)?;
        let loss = g.sum(weighted)?;
        let value = g.value(loss).data()[0];
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let grads = vars
            .iter()
            .map(|&v| g.grad(v).cloned().ok_or_else(|| Error::MissingGrad(format!("input {}", v.index()))))
            .collect::<Result<Vec<_>>>()?;
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(input.len());
        for i in 0..input.len() {
            let mut shifted = inputs.to_vec();
            shifted[k].data_mut()[i] += h;
            let (plus, _) = eval(&shifted, false)?;
            shifted[k].data_mut()[i] -= 2.0 * h;
            let (minus, _) = eval(&shifted, false)?;
            numeric.push((plus - minus) / (2.0 * h));
        }
        worst = worst.max(relative_error(analytic[k].data(), &numeric, 1e-10));
    }
    Ok(worst)
}

/// Moves BN affine parameters and biases off their exact initial values.
///
/// At initialization every β and bias is 0, so a channel that is constant
/// over the batch normalizes to exactly 0 and lands on the ReLU kink. Adding
/// `U(-scale, scale)` to these entries gives a generic point to check at.
pub fn jitter_affine<T: Element>(params: &mut NetworkParams<T>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7177e5);
    for e in params.store.entries_mut() {
        if matches!(e.kind, ParamKind::BnGamma | ParamKind::BnBeta | ParamKind::ConvBias) {
            for v in e.value.data_mut() {
                *v = T::from_f64_lossy(v.to_f64_lossy() + rng.random_range(-scale..scale));
            }
        }
    }
}

/// One-sided slopes further apart than this (relative) mark a kink.
const KINK_TOL: f64 = 1e-3;

/// Outcome of a full-objective check.
#[derive(Clone, Copy, Debug)]
pub struct CompositeCheck {
    /// f64 analytic gradient against f64 central differences.
    pub rel_err_f64: f64,
    /// f32 analytic gradient against f64 central differences of the same
    /// weights.
    pub rel_err_f32: f64,
    pub coordinates: usize,
    /// Whether the f32 pass produced the same stage-1 mask as the f64 pass.
    pub f32_mask_matches: bool,
    /// Fraction of stage-1 mask pixels that are 1. At 1.0 the masked images
    /// are all zero, every batch-norm channel on that path is constant, and
    /// each such layer scales rounding error by up to `1 / sqrt(eps)`; f32
    /// gradients are then dominated by noise while f64 stays accurate.
    pub mask_coverage: f64,
    /// Coordinates skipped because the perturbation flipped a pixel of the
    /// binary stage-1 mask, or because the one-sided slopes disagree (the
    /// base point sits on a ReLU or clamp kink).
    pub skipped: usize,
}

impl CompositeCheck {
    /// False when the stage-1 mask covers every pixel of the batch.
    pub fn f32_well_conditioned(&self) -> bool {
        self.mask_coverage < 1.0
    }
}

/// Checks the training objective (two-stage pass, segmentation loss on
/// `labeled`, inpainting loss on `unlabeled`) with respect to `coords`
/// randomly chosen trainable parameter elements.
pub fn check_objective(
    params: &NetworkParams<f32>,
    labeled: &[SegSample],
    unlabeled: &[SegSample],
    weights: &LossWeights,
    coords: usize,
    h: f64,
    seed: u64,
) -> Result<CompositeCheck> {
    let policy = BinarizePolicy::default();
    let base64: NetworkParams<f64> = params.cast();
    let mut p32 = params.clone();
    let analytic32 = loss_and_grads(&mut p32, labeled, unlabeled, weights, &policy)?;
    let mut p64 = base64.clone();
    let analytic64 = loss_and_grads(&mut p64, labeled, unlabeled, weights, &policy)?;

    let trainable: Vec<usize> = base64
        .store
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind.trainable())
        .map(|(i, _)| i)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut a32, mut a64, mut num) = (Vec::new(), Vec::new(), Vec::new());
    let mut skipped = 0;
    let mut attempts = 0;
    while num.len() < coords {
        attempts += 1;
        if attempts > 20 * coords {
            return Err(Error::Invalid("too many coordinates sit on discontinuities or kinks".into()));
        }
        let entry = trainable[rng.random_range(0..trainable.len())];
        let index = rng.random_range(0..base64.store.entries()[entry].value.len());
        let at = |delta: f64| -> Result<(f64, bool)> {
            let mut p = base64.clone();
            p.store.entries_mut()[entry].value.data_mut()[index] += delta;
            let e = loss_and_grads(&mut p, labeled, unlabeled, weights, &policy)?;
            Ok((e.total, e.mask_coarse == analytic64.mask_coarse))
        };
        let (plus, same_plus) = at(h)?;
        let (minus, same_minus) = at(-h)?;
        let (forward, backward) = ((plus - analytic64.total) / h, (analytic64.total - minus) / h);
        let kink = (forward - backward).abs() > KINK_TOL * forward.abs().max(backward.abs()).max(1.0);
        if !(same_plus && same_minus) || kink {
            skipped += 1;
            continue;
        }
        num.push((plus - minus) / (2.0 * h));
        let grad = |g: &Option<Tensor<f64>>| g.as_ref().map_or(0.0, |t| t.data()[index]);
        a64.push(grad(&analytic64.grads[entry]));
        a32.push(
            analytic32.grads[entry]
                .as_ref()
                .map_or(0.0, |t| t.data()[index].to_f64_lossy()),
        );
    }
    Ok(CompositeCheck {
        rel_err_f64: relative_error(&a64, &num, 1e-10),
        rel_err_f32: relative_error(&a32, &num, 1e-10),
        coordinates: num.len(),
        f32_mask_matches: analytic32.mask_coarse.cast::<f64>() == analytic64.mask_coarse,
        mask_coverage: analytic64.mask_coarse.sum() / analytic64.mask_coarse.len() as f64,
        skipped,
    })
}
