//! Deep-supervised segmentation loss, masked inpainting loss and their
//! weighted total.
//!
//! Per-sample losses have shape `[batch]`; the layer and sample sums are
//! scalars.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::kernels::{downsample_to, DownsampleMode};
use crate::network::LAYERS;
use crate::tensor::{Element, Tensor};

/// Loss weights and numerical guards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the segmentation loss over labeled samples.
    pub lambda_seg: f64,
    /// Weight of the inpainting loss over unlabeled samples.
    pub lambda_inp: f64,
    pub dice_eps: f64,
    pub bce_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_seg: 2.0,
            lambda_inp: 1.0,
            dice_eps: 1.0,
            bce_eps: 1e-7,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_seg < 0.0 || self.lambda_inp < 0.0 {
            return Err(Error::Invalid("loss weights must be non-negative".into()));
        }
        if !(self.dice_eps > 0.0) || !(self.bce_eps > 0.0 && self.bce_eps < 0.5) {
            return Err(Error::Invalid("dice_eps must be > 0 and bce_eps in (0, 0.5)".into()));
        }
        Ok(())
    }
}

fn check_target<T: Element>(g: &Graph<T>, pred: Var, target: &Tensor<T>, op: &'static str) -> Result<()> {
    if g.value(pred).shape() != target.shape() {
        return Err(shape_err(
            op,
            format!("prediction {:?} vs target {:?}", g.value(pred).shape(), target.shape()),
        ));
    }
    Ok(())
}

fn per_sample_count<T: Element>(t: &Tensor<T>) -> usize {
    match t.shape().first() {
        Some(&b) if b > 0 => t.len() / b,
        _ => 0,
    }
}

/// Binary cross-entropy, averaged over the pixels of each sample. `pred` is
/// clamped to `[eps, 1 - eps]`.
pub fn bce<T: Element>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
    check_target(g, pred, target, "bce")?;
    let n = per_sample_count(target);
    let eps = T::from_f64_lossy(eps);
    let p = g.clamp(pred, eps, T::one() - eps)?;
    let log_p = g.ln(p)?;
    let q = g.one_minus(p)?;
    let log_q = g.ln(q)?;
    let y = g.constant(target.clone())?;
    let not_y = g.constant(target.map(|v| T::one() - v))?;
    let a = g.mul(y, log_p)?;
    let b = g.mul(not_y, log_q)?;
    let ll = g.add(a, b)?;
    let per = g.batch_sum(ll)?;
    g.affine(per, -T::one() / T::from_usize(n).unwrap(), T::zero())
}

/// Soft Dice loss per sample: `1 - (2 sum(p y) + eps) / (sum p + sum y + eps)`.
pub fn dice_loss<T: Element>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
    check_target(g, pred, target, "dice_loss")?;
    let eps_t = T::from_f64_lossy(eps);
    let n = per_sample_count(target);
    let y = g.constant(target.clone())?;
    let py = g.mul(pred, y)?;
    let inter = g.batch_sum(py)?;
    let numer = g.affine(inter, T::from_f64_lossy(2.0), eps_t)?;
    let sum_p = g.batch_sum(pred)?;
    let sum_y: Vec<T> = target
        .data()
        .chunks(n.max(1))
        .map(|c| c.iter().copied().sum::<T>() + eps_t)
        .collect();
    let sum_y = g.constant(Tensor::new([sum_y.len()], sum_y)?)?;
    let denom = g.add(sum_p, sum_y)?;
    let ratio = g.div(numer, denom)?;
    g.one_minus(ratio)
}

/// Ground truth resized to the output resolution of every layer.
pub fn layer_targets<T: Element>(preds: &[Var; LAYERS], g: &Graph<T>, gt: &Tensor<T>) -> Result<[Tensor<T>; LAYERS]> {
    let mut out: [Option<Tensor<T>>; LAYERS] = Default::default();
    for (slot, &p) in out.iter_mut().zip(preds) {
        let (_, _, h, w) = g.value(p).dims4()?;
        *slot = Some(downsample_to(gt, h, w, DownsampleMode::Nearest)?);
    }
    Ok(out.map(|t| t.expect("filled above")))
}

/// Per-sample segmentation loss summed over the five layers, shape `[batch]`.
pub fn seg_loss_per_sample<T: Element>(
    g: &mut Graph<T>,
    y_fine: &[Var; LAYERS],
    y_gt: &Tensor<T>,
    w: &LossWeights,
) -> Result<Var> {
    let targets = layer_targets(y_fine, g, y_gt)?;
    let mut acc: Option<Var> = None;
    for (&pred, target) in y_fine.iter().zip(&targets) {
        let b = bce(g, pred, target, w.bce_eps)?;
        let d = dice_loss(g, pred, target, w.dice_eps)?;
        let l = g.add(b, d)?;
        acc = Some(match acc {
            Some(a) => g.add(a, l)?,
            None => l,
        });
    }
    Ok(acc.expect("five layers"))
}

/// Deep-supervised segmentation loss summed over samples:
/// `sum_i bce(y^i, gt^i) + dice(y^i, gt^i)` with `gt^i` the nearest-resized
/// ground truth.
pub fn seg_loss<T: Element>(
    g: &mut Graph<T>,
    y_fine: &[Var; LAYERS],
    y_gt: &Tensor<T>,
    w: &LossWeights,
) -> Result<Var> {
    let per = seg_loss_per_sample(g, y_fine, y_gt, w)?;
    g.sum(per)
}

/// Masked L1 reconstruction loss summed over layers and samples.
///
/// Layer `i` contributes `sum(m^i * |x_hat^i - x^i|) / max(1, C * sum(m^i))`
/// per sample, where `x^i` is the area-resized image and `m^i` the binary
/// mask broadcast over channels.
pub fn inpaint_loss<T: Element>(
    g: &mut Graph<T>,
    x_hat: &[Var; LAYERS],
    x: &Tensor<T>,
    masks: &[Tensor<T>; LAYERS],
) -> Result<Var> {
    let (b, c, _, _) = x.dims4()?;
    let mut acc: Option<Var> = None;
    for (&pred, mask) in x_hat.iter().zip(masks) {
        let (pb, pc, h, w) = g.value(pred).dims4()?;
        if (pb, pc) != (b, c) || mask.shape() != [b, 1, h, w] {
            return Err(shape_err(
                "inpaint_loss",
                format!(
                    "prediction {:?}, image {:?}, mask {:?}",
                    g.value(pred).shape(),
                    x.shape(),
                    mask.shape()
                ),
            ));
        }
        if mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::Invalid("inpaint_loss needs binary masks".into()));
        }
        let target = downsample_to(x, h, w, DownsampleMode::Area)?;
        let hw = h * w;
        let wide = Tensor::from_fn([b, c, h, w], |i| mask.data()[(i / (c * hw)) * hw + i % hw]);
        let denom: Vec<T> = mask
            .data()
            .chunks(hw)
            .map(|m| {
                let count = m.iter().copied().sum::<T>() * T::from_usize(c).unwrap();
                count.max(T::one())
            })
            .collect();
        let target = g.constant(target)?;
        let diff = g.sub(pred, target)?;
        let abs = g.abs(diff)?;
        let wide = g.constant(wide)?;
        let masked = g.mul(abs, wide)?;
        let num = g.batch_sum(masked)?;
        let denom = g.constant(Tensor::new([b], denom)?)?;
        let per = g.div(num, denom)?;
        let layer_sum = g.sum(per)?;
        acc = Some(match acc {
            Some(a) => g.add(a, layer_sum)?,
            None => layer_sum,
        });
    }
    Ok(acc.expect("five layers"))
}

/// `lambda_seg * seg + lambda_inp * inp`; a missing term contributes nothing.
pub fn total_loss<T: Element>(
    g: &mut Graph<T>,
    seg: Option<Var>,
    inp: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let seg = seg
        .map(|v| g.affine(v, T::from_f64_lossy(w.lambda_seg), T::zero()))
        .transpose()?;
    let inp = inp
        .map(|v| g.affine(v, T::from_f64_lossy(w.lambda_inp), T::zero()))
        .transpose()?;
    match (seg, inp) {
        (Some(a), Some(b)) => g.add(a, b),
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => Err(Error::Invalid(
            "total_loss needs a labeled or an unlabeled term".into(),
        )),
    }
}
