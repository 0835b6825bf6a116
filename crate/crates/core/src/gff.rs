//! Gated feature fusion of segmentation and inpainting features, plus the
//! plain addition and concatenation variants used for ablations.
//!
//! For features `e_seg` and `e_inp` of `C` channels:
//!
//! ```text
//! r  = sigmoid(W_r [e_seg, e_inp])        reset gate
//! s  = sigmoid(W_s [e_seg, e_inp])        select gate
//! e~ = W [r * e_inp, e_seg]
//! e  = s * e~ + (1 - s) * e_seg
//! ```
//!
//! The three convolutions are 3x3, padding 1, with bias, mapping `2C -> C`.
//! There is no normalization inside the module.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv, ParamBuilder, Session};
use crate::tensor::Element;

/// How the two encoder streams are merged at each decoder layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Gff,
    Add,
    Concat,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Gff, FusionMode::Add, FusionMode::Concat];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gff => "gff",
            Self::Add => "add",
            Self::Concat => "concat",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gff" => Ok(Self::Gff),
            "add" => Ok(Self::Add),
            "concat" => Ok(Self::Concat),
            other => Err(Error::Invalid(format!(
                "unknown fusion mode `{other}` (expected gff, add or concat)"
            ))),
        }
    }
}

/// Reset gate, select gate and projection convolutions of one fusion point.
#[derive(Clone, Debug)]
pub struct GffParams {
    pub reset: Conv,
    pub select: Conv,
    pub project: Conv,
}

impl GffParams {
    pub fn build<T: Element>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        let c2 = 2 * channels;
        Self {
            reset: b.conv(&format!("{name}.reset"), c2, channels, 3, 1, 1, true),
            select: b.conv(&format!("{name}.select"), c2, channels, 3, 1, 1, true),
            project: b.conv(&format!("{name}.project"), c2, channels, 3, 1, 1, true),
        }
    }
}

/// Intermediate values of one gated fusion, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct GffTrace {
    pub reset: Var,
    pub select: Var,
    pub reintegrated: Var,
    pub fused: Var,
}

/// Fusion point parameters for one decoder layer. Both decoders read the
/// same instance.
#[derive(Clone, Debug)]
pub enum FusionLayer {
    Gff(GffParams),
    Add,
    /// 1x1 convolution of `[e_seg, e_inp]` back to `C` channels.
    Concat(Conv),
}

impl FusionLayer {
    pub fn build<T: Element>(
        b: &mut ParamBuilder<'_, T>,
        mode: FusionMode,
        name: &str,
        channels: usize,
    ) -> Self {
        match mode {
            FusionMode::Gff => Self::Gff(GffParams::build(b, name, channels)),
            FusionMode::Add => Self::Add,
            FusionMode::Concat => Self::Concat(b.conv(
                &format!("{name}.merge"),
                2 * channels,
                channels,
                1,
                1,
                0,
                true,
            )),
        }
    }

    pub fn mode(&self) -> FusionMode {
        match self {
            Self::Gff(_) => FusionMode::Gff,
            Self::Add => FusionMode::Add,
            Self::Concat(_) => FusionMode::Concat,
        }
    }
}

fn same_shape<T: Element>(s: &Session<'_, T>, a: Var, b: Var, op: &'static str) -> Result<()> {
    let (sa, sb) = (s.graph.value(a).shape(), s.graph.value(b).shape());
    if sa != sb {
        return Err(shape_err(op, format!("e_seg {sa:?} vs e_inp {sb:?}")));
    }
    Ok(())
}

/// Gated fusion, returning every intermediate.
pub fn gff_trace<T: Element>(
    s: &mut Session<'_, T>,
    p: &GffParams,
    e_seg: Var,
    e_inp: Var,
) -> Result<GffTrace> {
    same_shape(s, e_seg, e_inp, "gff")?;
    let both = s.graph.concat(e_seg, e_inp)?;
    let r = p.reset.forward(s, both)?;
    let r = s.graph.sigmoid(r)?;
    let sel = p.select.forward(s, both)?;
    let sel = s.graph.sigmoid(sel)?;
    let gated = s.graph.mul(r, e_inp)?;
    let merged = s.graph.concat(gated, e_seg)?;
    let reintegrated = p.project.forward(s, merged)?;
    let fused = gate_combine(s, sel, reintegrated, e_seg)?;
    Ok(GffTrace {
        reset: r,
        select: sel,
        reintegrated,
        fused,
    })
}

/// Gated fusion; output has the shape of `e_seg`.
pub fn gff_forward<T: Element>(
    s: &mut Session<'_, T>,
    p: &GffParams,
    e_seg: Var,
    e_inp: Var,
) -> Result<Var> {
    Ok(gff_trace(s, p, e_seg, e_inp)?.fused)
}

/// `select * reintegrated + (1 - select) * e_seg`
pub fn gate_combine<T: Element>(
    s: &mut Session<'_, T>,
    select: Var,
    reintegrated: Var,
    e_seg: Var,
) -> Result<Var> {
    let a = s.graph.mul(select, reintegrated)?;
    let keep = s.graph.one_minus(select)?;
    let b = s.graph.mul(keep, e_seg)?;
    s.graph.add(a, b)
}

/// Merges the two streams according to the layer's mode.
pub fn fuse<T: Element>(
    s: &mut Session<'_, T>,
    layer: &FusionLayer,
    e_seg: Var,
    e_inp: Var,
) -> Result<Var> {
    match layer {
        FusionLayer::Gff(p) => gff_forward(s, p, e_seg, e_inp),
        FusionLayer::Add => {
            same_shape(s, e_seg, e_inp, "fuse(add)")?;
            s.graph.add(e_seg, e_inp)
        }
        FusionLayer::Concat(conv) => {
            same_shape(s, e_seg, e_inp, "fuse(concat)")?;
            let both = s.graph.concat(e_seg, e_inp)?;
            conv.forward(s, both)
        }
    }
}
