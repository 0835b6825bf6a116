//! Two-stage coarse-to-fine forward pass.
//!
//! Stage 1 runs the shared encoder and the segmentation decoder with plain
//! skip connections to get a coarse map. Its binarized result masks the input
//! image. Stage 2 encodes the original and the masked image with the same
//! encoder, fuses the two feature streams per layer and runs both decoders
//! with a prediction head on every layer.
//!
//! The binary mask is a gradient barrier: it enters stage 2 as a constant.

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::gff::fuse;
use crate::kernels::{downsample_to, DownsampleMode};
use crate::network::{Branch, Network, LAYERS};
use crate::nn::{BnStream, Session};
use crate::tensor::{Element, Tensor};

/// Threshold rule turning probabilities into a binary mask: `p >= threshold`
/// maps to 1.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinarizePolicy {
    pub threshold: f64,
}

impl Default for BinarizePolicy {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

impl BinarizePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.threshold > 0.0 && self.threshold < 1.0 {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "binarize threshold {} outside (0, 1)",
                self.threshold
            )))
        }
    }

    pub fn binarize<T: Element>(&self, probs: &Tensor<T>) -> Tensor<T> {
        let t = T::from_f64_lossy(self.threshold);
        probs.map(|p| if p >= t { T::one() } else { T::zero() })
    }
}

/// Everything one two-stage pass produces. `Var`s live on the session graph
/// that ran the pass; index 0 of the per-layer arrays is layer 1.
#[derive(Clone, Debug)]
pub struct ForwardOutputs<T> {
    pub y_coarse: Var,
    pub mask_coarse: Tensor<T>,
    pub x_mask: Tensor<T>,
    pub y_fine: [Var; LAYERS],
    pub x_hat: [Var; LAYERS],
    pub mask_per_layer: [Tensor<T>; LAYERS],
}

/// `x * (1 - mask)` with a single-channel binary mask broadcast over all
/// channels of `x`.
pub fn mask_image<T: Element>(x: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let (mb, mc, mh, mw) = mask.dims4()?;
    if (mb, mc, mh, mw) != (b, 1, h, w) {
        return Err(shape_err(
            "mask_image",
            format!("mask {:?} cannot broadcast over image {:?}", mask.shape(), x.shape()),
        ));
    }
    if mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::Invalid("mask_image needs a binary {0, 1} mask".into()));
    }
    let hw = h * w;
    let (xd, md) = (x.data(), mask.data());
    let data = (0..xd.len())
        .map(|i| {
            let n = i / (c * hw);
            xd[i] * (T::one() - md[n * hw + i % hw])
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Stage-1 decoding from already-encoded features, skip connections carrying
/// `e_seg^i` unchanged. Batch norm uses the auxiliary statistics.
pub fn coarse_from_features<T: Element>(
    net: &Network,
    s: &mut Session<'_, T>,
    e_seg: &[Var; LAYERS],
) -> Result<Var> {
    let prev = s.set_bn_stream(BnStream::Auxiliary);
    let out = (|| {
        let mut d = None;
        for layer in (1..=LAYERS).rev() {
            d = Some(net.decoder_step(s, Branch::Seg, layer, e_seg[layer - 1], d)?);
        }
        net.seg_head(s, 1, d.expect("five layers"))
    })();
    s.set_bn_stream(prev);
    out
}

/// Coarse segmentation probabilities for `x`.
pub fn coarse_forward<T: Element>(net: &Network, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
    let e_seg = net.encode(s, x)?;
    coarse_from_features(net, s, &e_seg)
}

/// Stage-2 pass given the original-image features and the masked image.
/// Returns `(y_fine, x_hat)`. The masked image is encoded with the auxiliary
/// batch-norm statistics.
pub fn fine_from_features<T: Element>(
    net: &Network,
    s: &mut Session<'_, T>,
    e_seg: &[Var; LAYERS],
    x_mask: Var,
) -> Result<([Var; LAYERS], [Var; LAYERS])> {
    let prev = s.set_bn_stream(BnStream::Auxiliary);
    let e_inp = net.encode(s, x_mask);
    s.set_bn_stream(prev);
    let e_inp = e_inp?;
    let mut y_fine = [x_mask; LAYERS];
    let mut x_hat = [x_mask; LAYERS];
    let (mut d_seg, mut d_inp) = (None, None);
    for layer in (1..=LAYERS).rev() {
        let i = layer - 1;
        let fused = fuse(s, net.fusion_layer(layer), e_seg[i], e_inp[i])?;
        let ds = net.decoder_step(s, Branch::Seg, layer, fused, d_seg)?;
        let di = net.decoder_step(s, Branch::Inp, layer, fused, d_inp)?;
        y_fine[i] = net.seg_head(s, layer, ds)?;
        x_hat[i] = net.inp_head(s, layer, di)?;
        d_seg = Some(ds);
        d_inp = Some(di);
    }
    Ok((y_fine, x_hat))
}

/// Stage 2 from the two input images.
pub fn fine_forward<T: Element>(
    net: &Network,
    s: &mut Session<'_, T>,
    x: Var,
    x_mask: Var,
) -> Result<([Var; LAYERS], [Var; LAYERS])> {
    let e_seg = net.encode(s, x)?;
    fine_from_features(net, s, &e_seg, x_mask)
}

/// Nearest-neighbour copies of the coarse mask at every output resolution.
pub fn masks_per_layer<T: Element>(net: &Network, mask: &Tensor<T>) -> Result<[Tensor<T>; LAYERS]> {
    let cfg = net.cfg();
    let mut out: [Option<Tensor<T>>; LAYERS] = Default::default();
    for (i, slot) in out.iter_mut().enumerate() {
        let side = cfg.output_side(i + 1);
        *slot = Some(downsample_to(mask, side, side, DownsampleMode::Nearest)?);
    }
    Ok(out.map(|m| m.expect("filled above")))
}

/// Full coarse-to-fine pass.
///
/// The original-image encoding is computed once and serves both the coarse
/// decoder and the fine stage.
pub fn two_stage<T: Element>(
    net: &Network,
    s: &mut Session<'_, T>,
    x: &Tensor<T>,
    policy: &BinarizePolicy,
) -> Result<ForwardOutputs<T>> {
    policy.validate()?;
    let xv = s.input(x.clone())?;
    let e_seg = net.encode(s, xv)?;
    let y_coarse = coarse_from_features(net, s, &e_seg)?;
    let mask_coarse = policy.binarize(s.graph.value(y_coarse));
    let x_mask = mask_image(x, &mask_coarse)?;
    let xm = s.input(x_mask.clone())?;
    let (y_fine, x_hat) = fine_from_features(net, s, &e_seg, xm)?;
    let mask_per_layer = masks_per_layer(net, &mask_coarse)?;
    Ok(ForwardOutputs {
        y_coarse,
        mask_coarse,
        x_mask,
        y_fine,
        x_hat,
        mask_per_layer,
    })
}
