//! Shared residual encoder, the segmentation and inpainting decoders, and
//! the per-layer prediction heads.
//!
//! Layers are numbered 1 (finest) to 5 (coarsest). Decoder layer `i`
//! consumes the fused skip feature `e^i` and, for `i <= 4`, the upsampled
//! output of decoder layer `i + 1`.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::gff::{FusionLayer, FusionMode};
use crate::kernels::UpsampleMode;
use crate::nn::{BasicBlock, BnSettings, Conv, ConvBnRelu, Mode, ParamBuilder, ParamStore, Session};
use crate::tensor::Element;

pub const LAYERS: usize = 5;

/// Encoder family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    /// 3x3 stem at full resolution, `blocks_per_stage` basic blocks per
    /// stage, stages 2-5 each halve the resolution.
    #[default]
    Toy,
    /// ResNet34 layout: 7x7 stride-2 stem, max-pool, then [3, 4, 6, 3]
    /// basic blocks. Layer-1 outputs are upsampled back to input size.
    Resnet34,
}

impl Backbone {
    fn stage_blocks(self, blocks_per_stage: usize) -> [usize; LAYERS] {
        match self {
            Self::Toy => [blocks_per_stage; LAYERS],
            Self::Resnet34 => [0, 3, 4, 6, 3],
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub stage_widths: [usize; LAYERS],
    pub blocks_per_stage: usize,
    pub input_size: usize,
    pub backbone: Backbone,
    /// Decoder upsampling.
    pub upsample: UpsampleMode,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ArchConfig {
    pub fn toy() -> Self {
        Self {
            in_channels: 3,
            stage_widths: [16, 32, 64, 128, 256],
            blocks_per_stage: 1,
            input_size: 64,
            backbone: Backbone::Toy,
            upsample: UpsampleMode::Bilinear,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// ResNet34 widths and depths at 256x256 input.
    pub fn paper() -> Self {
        Self {
            stage_widths: [64, 64, 128, 256, 512],
            input_size: 256,
            backbone: Backbone::Resnet34,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Invalid("in_channels must be positive".into()));
        }
        if self.stage_widths.contains(&0) {
            return Err(Error::Invalid(format!(
                "stage_widths must be positive, got {:?}",
                self.stage_widths
            )));
        }
        if self.blocks_per_stage == 0 && self.backbone == Backbone::Toy {
            return Err(Error::Invalid("blocks_per_stage must be positive".into()));
        }
        let div = self.size_divisor();
        if self.input_size == 0 || !self.input_size.is_multiple_of(div) {
            return Err(Error::Invalid(format!(
                "input_size {} must be a positive multiple of {div}",
                self.input_size
            )));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Invalid("bn_eps must be > 0 and bn_momentum in [0, 1]".into()));
        }
        Ok(())
    }

    fn size_divisor(&self) -> usize {
        match self.backbone {
            Backbone::Toy => 16,
            Backbone::Resnet34 => 32,
        }
    }

    /// Channels of `e^i`, 1-based.
    pub fn width(&self, layer: usize) -> usize {
        self.stage_widths[layer - 1]
    }

    /// Spatial side of the encoder feature `e^i`.
    pub fn feature_side(&self, layer: usize) -> usize {
        match self.backbone {
            Backbone::Toy => self.input_size >> (layer - 1),
            Backbone::Resnet34 => self.input_size >> layer,
        }
    }

    /// Spatial side of the layer-`i` prediction.
    pub fn output_side(&self, layer: usize) -> usize {
        match (self.backbone, layer) {
            (Backbone::Resnet34, 1) => self.input_size,
            _ => self.feature_side(layer),
        }
    }

    pub fn bn_settings(&self) -> BnSettings {
        BnSettings {
            momentum: self.bn_momentum,
            eps: self.bn_eps,
        }
    }
}

/// Which decoder a step belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Seg,
    Inp,
}

#[derive(Clone, Debug)]
struct Stage {
    stem: Option<ConvBnRelu>,
    pool: bool,
    blocks: Vec<BasicBlock>,
}

/// Two Conv-BN-ReLU units.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub first: ConvBnRelu,
    pub second: ConvBnRelu,
}

/// Parameter layout of the whole dual-decoder network. Holds handles into a
/// [`ParamStore`], never values.
#[derive(Clone, Debug)]
pub struct Network {
    cfg: ArchConfig,
    fusion: FusionMode,
    stages: Vec<Stage>,
    fusion_layers: Vec<FusionLayer>,
    dec_seg: Vec<DecoderBlock>,
    dec_inp: Vec<DecoderBlock>,
    seg_heads: Vec<Conv>,
    inp_heads: Vec<Conv>,
}

/// Layout plus values.
#[derive(Clone, Debug)]
pub struct NetworkParams<T> {
    pub net: Network,
    pub store: ParamStore<T>,
}

impl<T: Element> NetworkParams<T> {
    /// Builds the layout and initializes every parameter from `seed`.
    ///
    /// Kernels are He-normal (`std = sqrt(2 / fan_in)`); biases and BN beta
    /// start at zero, BN gamma at one.
    pub fn init(cfg: &ArchConfig, fusion: FusionMode, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let net = Network::build(cfg.clone(), fusion, &mut ParamBuilder::new(&mut store, seed));
        Ok(Self { net, store })
    }

    /// Splits into the layout and a session over the values.
    pub fn session(&mut self, mode: Mode) -> (&Network, Session<'_, T>) {
        let bn = self.net.cfg.bn_settings();
        (&self.net, Session::new(&mut self.store, mode, bn))
    }

    pub fn cast<U: Element>(&self) -> NetworkParams<U> {
        NetworkParams {
            net: self.net.clone(),
            store: self.store.cast(),
        }
    }
}

/// Free-function form of [`NetworkParams::init`].
pub fn init_params<T: Element>(
    cfg: &ArchConfig,
    fusion: FusionMode,
    seed: u64,
) -> Result<NetworkParams<T>> {
    NetworkParams::init(cfg, fusion, seed)
}

impl Network {
    fn build<T: Element>(cfg: ArchConfig, fusion: FusionMode, b: &mut ParamBuilder<'_, T>) -> Self {
        let blocks = cfg.backbone.stage_blocks(cfg.blocks_per_stage);
        let mut stages = Vec::with_capacity(LAYERS);
        let mut cin = cfg.in_channels;
        for (idx, &n_blocks) in blocks.iter().enumerate() {
            let layer = idx + 1;
            let width = cfg.width(layer);
            let name = format!("encoder.stage{layer}");
            let (stem, pool, first_stride) = match (cfg.backbone, layer) {
                (Backbone::Toy, 1) => (
                    Some(ConvBnRelu::build(b, &format!("{name}.stem"), cin, width, 3, 1)),
                    false,
                    1,
                ),
                (Backbone::Resnet34, 1) => (
                    Some(ConvBnRelu::build(b, &format!("{name}.stem"), cin, width, 7, 2)),
                    false,
                    1,
                ),
                (Backbone::Resnet34, 2) => (None, true, 1),
                _ => (None, false, 2),
            };
            if stem.is_some() {
                cin = width;
            }
            let mut stage_blocks = Vec::with_capacity(n_blocks);
            for k in 0..n_blocks {
                let stride = if k == 0 { first_stride } else { 1 };
                stage_blocks.push(BasicBlock::build(b, &format!("{name}.block{k}"), cin, width, stride));
                cin = width;
            }
            stages.push(Stage {
                stem,
                pool,
                blocks: stage_blocks,
            });
        }

        let fusion_layers = (1..=LAYERS)
            .map(|i| FusionLayer::build(b, fusion, &format!("fusion{i}"), cfg.width(i)))
            .collect();

        let mut decoder = |branch: &str| -> Vec<DecoderBlock> {
            (1..=LAYERS)
                .map(|i| {
                    let out = cfg.width(i);
                    let cin = if i == LAYERS { out } else { out + cfg.width(i + 1) };
                    let name = format!("decoder_{branch}.layer{i}");
                    DecoderBlock {
                        first: ConvBnRelu::build(b, &format!("{name}.a"), cin, out, 3, 1),
                        second: ConvBnRelu::build(b, &format!("{name}.b"), out, out, 3, 1),
                    }
                })
                .collect()
        };
        let dec_seg = decoder("seg");
        let dec_inp = decoder("inp");

        let seg_heads = (1..=LAYERS)
            .map(|i| b.conv(&format!("head_seg.layer{i}"), cfg.width(i), 1, 1, 1, 0, true))
            .collect();
        let inp_heads = (1..=LAYERS)
            .map(|i| {
                b.conv(
                    &format!("head_inp.layer{i}"),
                    cfg.width(i),
                    cfg.in_channels,
                    1,
                    1,
                    0,
                    true,
                )
            })
            .collect();

        Self {
            cfg,
            fusion,
            stages,
            fusion_layers,
            dec_seg,
            dec_inp,
            seg_heads,
            inp_heads,
        }
    }

    pub fn cfg(&self) -> &ArchConfig {
        &self.cfg
    }

    pub fn fusion(&self) -> FusionMode {
        self.fusion
    }

    /// Fusion parameters of layer `i` (1-based), shared by both decoders.
    pub fn fusion_layer(&self, layer: usize) -> &FusionLayer {
        &self.fusion_layers[layer - 1]
    }

    pub fn decoder_block(&self, branch: Branch, layer: usize) -> &DecoderBlock {
        match branch {
            Branch::Seg => &self.dec_seg[layer - 1],
            Branch::Inp => &self.dec_inp[layer - 1],
        }
    }

    pub fn seg_head_conv(&self, layer: usize) -> &Conv {
        &self.seg_heads[layer - 1]
    }

    pub fn inp_head_conv(&self, layer: usize) -> &Conv {
        &self.inp_heads[layer - 1]
    }

    /// Runs the shared encoder, returning `[e^1, ..., e^5]`.
    pub fn encode<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<[Var; LAYERS]> {
        let (_, c, h, w) = s.graph.value(x).dims4()?;
        let n = self.cfg.input_size;
        if c != self.cfg.in_channels || h != n || w != n {
            return Err(shape_err(
                "encode",
                format!(
                    "expected {}x{n}x{n} input, got {c}x{h}x{w}",
                    self.cfg.in_channels
                ),
            ));
        }
        let mut feats = [x; LAYERS];
        let mut cur = x;
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(stem) = &stage.stem {
                cur = stem.forward(s, cur)?;
            }
            if stage.pool {
                cur = s.graph.maxpool2x(cur)?;
            }
            for block in &stage.blocks {
                cur = block.forward(s, cur)?;
            }
            feats[i] = cur;
        }
        Ok(feats)
    }

    /// One decoder layer. `d_next` must be given exactly when `layer <= 4`.
    pub fn decoder_step<T: Element>(
        &self,
        s: &mut Session<'_, T>,
        branch: Branch,
        layer: usize,
        e_fused: Var,
        d_next: Option<Var>,
    ) -> Result<Var> {
        if !(1..=LAYERS).contains(&layer) {
            return Err(Error::Invalid(format!("decoder layer {layer} outside 1..=5")));
        }
        let block = self.decoder_block(branch, layer);
        let input = match (layer, d_next) {
            (LAYERS, None) => e_fused,
            (LAYERS, Some(_)) => {
                return Err(Error::Invalid("decoder layer 5 takes no deeper feature".into()))
            }
            (_, None) => {
                return Err(Error::Invalid(format!(
                    "decoder layer {layer} needs the layer-{} output",
                    layer + 1
                )))
            }
            (_, Some(d)) => {
                let up = s.graph.upsample2x(d, self.cfg.upsample)?;
                let (_, _, uh, uw) = s.graph.value(up).dims4()?;
                let (_, _, eh, ew) = s.graph.value(e_fused).dims4()?;
                if (uh, uw) != (eh, ew) {
                    return Err(shape_err(
                        "decoder_step",
                        format!("upsampled {uh}x{uw} does not match skip {eh}x{ew}"),
                    ));
                }
                s.graph.concat(e_fused, up)?
            }
        };
        let y = block.first.forward(s, input)?;
        block.second.forward(s, y)
    }

    fn head<T: Element>(&self, s: &mut Session<'_, T>, conv: &Conv, layer: usize, d: Var) -> Result<Var> {
        let d = if self.cfg.output_side(layer) != self.cfg.feature_side(layer) {
            s.graph.upsample2x(d, UpsampleMode::Bilinear)?
        } else {
            d
        };
        let y = conv.forward(s, d)?;
        s.graph.sigmoid(y)
    }

    /// Segmentation probability map of layer `i`: 1x1 conv then sigmoid.
    pub fn seg_head<T: Element>(&self, s: &mut Session<'_, T>, layer: usize, d: Var) -> Result<Var> {
        self.head(s, &self.seg_heads[layer - 1], layer, d)
    }

    /// Inpainted image of layer `i`: 1x1 conv then sigmoid.
    pub fn inp_head<T: Element>(&self, s: &mut Session<'_, T>, layer: usize, d: Var) -> Result<Var> {
        self.head(s, &self.inp_heads[layer - 1], layer, d)
    }
}
