//! Semi-supervised training, evaluation and single-image prediction.
//!
//! Every step pushes a labeled and an unlabeled sub-batch through one
//! two-stage pass. The labeled part gets the deep-supervised segmentation
//! loss, the unlabeled part the masked inpainting loss; nothing is computed
//! on the stage-1 output.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::data::{augment, image_batch, mask_batch, prepare, AugmentConfig, Raster, SegSample, Split};
use crate::error::{io_err, Error, Result};
use crate::gff::FusionMode;
use crate::losses::{inpaint_loss, seg_loss, total_loss, LossWeights};
use crate::metrics::{confusion_metrics, MetricReport};
use crate::network::{ArchConfig, NetworkParams, LAYERS};
use crate::nn::Mode;
use crate::optim::{sgd_update, OptimConfig, OptimState};
use crate::pipeline::{two_stage, BinarizePolicy};
use crate::tensor::{Element, Tensor};
use crate::{Graph, Var};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
const EVAL_BATCH: usize = 8;

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Labeled images per step.
    pub labeled_batch: usize,
    /// Unlabeled images per step; 0 trains on labeled data only.
    pub unlabeled_batch: usize,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub binarize: BinarizePolicy,
    /// Random flips, right-angle rotations, zoom and crop.
    pub augment: bool,
    /// Seeds initialization, shuffling and augmentation.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            labeled_batch: 2,
            unlabeled_batch: 2,
            optim: OptimConfig::default(),
            loss: LossWeights::default(),
            binarize: BinarizePolicy::default(),
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.labeled_batch == 0 {
            return Err(Error::Invalid("epochs and labeled_batch must be positive".into()));
        }
        self.optim.validate()?;
        self.loss.validate()?;
        self.binarize.validate()
    }
}

/// Unweighted loss terms of one step and the learning rate it used.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub seg: Option<f64>,
    pub inp: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

/// One row of `metrics.csv`. Validation columns are empty without a
/// validation set; loss columns are empty when no step had that term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub loss_seg: Option<f64>,
    pub loss_inp: Option<f64>,
    pub val_dice: Option<f64>,
    pub val_iou: Option<f64>,
    pub val_acc: Option<f64>,
    pub val_rec: Option<f64>,
    pub val_spe: Option<f64>,
}

impl EpochLog {
    pub fn val(&self) -> Option<MetricReport> {
        Some(MetricReport {
            dice: self.val_dice?,
            iou: self.val_iou?,
            acc: self.val_acc?,
            rec: self.val_rec?,
            spe: self.val_spe?,
        })
    }
}

/// Indices into `0..n`, reshuffled every time the list is exhausted.
struct Cycle {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycle {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Loss terms and gradients of one combined batch.
#[derive(Clone, Debug)]
pub struct LossEval<T> {
    /// Unweighted segmentation loss over the labeled samples.
    pub seg: Option<f64>,
    /// Unweighted inpainting loss over the unlabeled samples.
    pub inp: Option<f64>,
    pub total: f64,
    /// Indexed like the parameter store entries.
    pub grads: Vec<Option<Tensor<T>>>,
    /// Stage-1 binary mask of the combined batch.
    pub mask_coarse: Tensor<T>,
}

/// Forward and backward pass of the training objective without an update.
///
/// Labeled samples come first in the combined batch. Unlabeled masks are
/// never read. BN runs in train mode over the combined batch.
pub fn loss_and_grads<T: Element>(
    params: &mut NetworkParams<T>,
    labeled: &[SegSample],
    unlabeled: &[SegSample],
    weights: &LossWeights,
    policy: &BinarizePolicy,
) -> Result<LossEval<T>> {
    let (nl, nu) = (labeled.len(), unlabeled.len());
    if nl + nu == 0 {
        return Err(Error::Invalid("a training batch needs at least one sample".into()));
    }
    let all: Vec<&SegSample> = labeled.iter().chain(unlabeled).collect();
    let x: Tensor<T> = image_batch(&all)?;

    let (net, mut s) = params.session(Mode::TRAIN);
    let out = two_stage(net, &mut s, &x, policy)?;
    let g = &mut s.graph;
    let part = |g: &mut Graph<T>, v: Var, idx: &[usize]| {
        if idx.len() == nl + nu {
            Ok(v)
        } else {
            g.select_batch(v, idx)
        }
    };

    let seg = if nl > 0 {
        let idx: Vec<usize> = (0..nl).collect();
        let mut y = out.y_fine;
        for v in y.iter_mut() {
            *v = part(g, *v, &idx)?;
        }
        let gt = mask_batch(&labeled.iter().collect::<Vec<_>>())?;
        Some(seg_loss(g, &y, &gt, weights)?)
    } else {
        None
    };
    let inp = if nu > 0 {
        let idx: Vec<usize> = (nl..nl + nu).collect();
        let mut x_hat = out.x_hat;
        for v in x_hat.iter_mut() {
            *v = part(g, *v, &idx)?;
        }
        let masks: [Tensor<T>; LAYERS] = transpose(out.mask_per_layer.map(|m| m.select_batch(&idx)))?;
        let xu = x.select_batch(&idx)?;
        Some(inpaint_loss(g, &x_hat, &xu, &masks)?)
    } else {
        None
    };
    let read = |g: &Graph<T>, v: Option<Var>| v.map(|v| g.value(v).data()[0].to_f64_lossy());
    let (seg_value, inp_value) = (read(g, seg), read(g, inp));
    let total = total_loss(g, seg, inp, weights)?;
    let total_value = g.value(total).data()[0].to_f64_lossy();
    s.backward(total)?;
    Ok(LossEval {
        seg: seg_value,
        inp: inp_value,
        total: total_value,
        grads: s.take_grads(),
        mask_coarse: out.mask_coarse,
    })
}

/// One optimizer step on a labeled and an unlabeled sub-batch. Samples must
/// already have the network input size.
pub fn train_step(
    params: &mut NetworkParams<f32>,
    opt: &mut OptimState<f32>,
    labeled: &[SegSample],
    unlabeled: &[SegSample],
    weights: &LossWeights,
    policy: &BinarizePolicy,
) -> Result<StepLosses> {
    if opt.iter == opt.max_iter {
        return Err(Error::Invalid(format!("schedule exhausted after {} steps", opt.max_iter)));
    }
    let lr = opt.current_lr()?;
    let eval = loss_and_grads(params, labeled, unlabeled, weights, policy)?;
    sgd_update(&mut params.store, &eval.grads, lr, opt)?;
    opt.iter += 1;
    Ok(StepLosses {
        seg: eval.seg,
        inp: eval.inp,
        total: eval.total,
        lr,
    })
}

fn transpose<T, const N: usize>(items: [Result<T>; N]) -> Result<[T; N]> {
    let mut out = Vec::with_capacity(N);
    for item in items {
        out.push(item?);
    }
    Ok(out.try_into().ok().expect("length N"))
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Highest validation Dice, or the final state without a validation set.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochLog>,
}

/// Full training run.
///
/// An epoch is one pass over the labeled set in `labeled_batch` chunks; the
/// unlabeled pool is cycled to fill `unlabeled_batch` per step. Validation
/// runs after every epoch. With `out` set, `metrics.csv` and the best
/// checkpoint are written there. `on_epoch` sees each log row as it is made.
pub fn train(
    arch: &ArchConfig,
    fusion: FusionMode,
    cfg: &TrainConfig,
    data: &Split,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    arch.validate()?;
    if data.labeled.is_empty() {
        return Err(Error::Invalid("training needs at least one labeled sample".into()));
    }
    let side = arch.input_size;
    let aug = AugmentConfig::for_input(side);
    let base = if cfg.augment { aug.working_size } else { side };
    let labeled: Vec<SegSample> = data.labeled.iter().map(|s| prepare(s, base)).collect();
    // withhold again in case the caller passed masks along
    let unlabeled: Vec<SegSample> = if cfg.unlabeled_batch > 0 {
        data.unlabeled.iter().map(|s| prepare(&s.withhold_mask(), base)).collect()
    } else {
        Vec::new()
    };
    let val: Vec<SegSample> = data.val.iter().map(|s| prepare(s, side)).collect();
    let view = |s: &SegSample, seed: u64| -> Result<SegSample> {
        if cfg.augment {
            augment(s, &aug, seed)
        } else {
            Ok(s.clone())
        }
    };

    let steps_per_epoch = labeled.len().div_ceil(cfg.labeled_batch);
    let max_iter = (cfg.epochs * steps_per_epoch) as u64;
    let mut params = NetworkParams::<f32>::init(arch, fusion, cfg.seed)?;
    let mut opt = OptimState::new(cfg.optim, max_iter)?;
    let mut unlabeled_order = Cycle::new(unlabeled.len(), stream(cfg.seed, 0));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;

    for epoch in 1..=cfg.epochs {
        let mut rng = stream(cfg.seed, epoch as u64);
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(&mut rng);
        let (mut seg_sum, mut seg_n, mut inp_sum, mut inp_n, mut lr) = (0.0, 0, 0.0, 0, 0.0);
        for chunk in order.chunks(cfg.labeled_batch) {
            let lab = chunk
                .iter()
                .map(|&i| view(&labeled[i], rng.next_u64()))
                .collect::<Result<Vec<_>>>()?;
            let unl = if unlabeled.is_empty() {
                Vec::new()
            } else {
                (0..cfg.unlabeled_batch)
                    .map(|_| view(&unlabeled[unlabeled_order.next()], rng.next_u64()))
                    .collect::<Result<Vec<_>>>()?
            };
            let step = train_step(&mut params, &mut opt, &lab, &unl, &cfg.loss, &cfg.binarize)?;
            if let Some(v) = step.seg {
                seg_sum += v;
                seg_n += 1;
            }
            if let Some(v) = step.inp {
                inp_sum += v;
                inp_n += 1;
            }
            lr = step.lr;
        }
        let report = if val.is_empty() {
            None
        } else {
            Some(evaluate(&mut params, &val, &cfg.binarize)?.mean)
        };
        let mean = |sum: f64, n: usize| (n > 0).then(|| sum / n as f64);
        let log = EpochLog {
            epoch,
            lr,
            loss_seg: mean(seg_sum, seg_n),
            loss_inp: mean(inp_sum, inp_n),
            val_dice: report.map(|r| r.dice),
            val_iou: report.map(|r| r.iou),
            val_acc: report.map(|r| r.acc),
            val_rec: report.map(|r| r.rec),
            val_spe: report.map(|r| r.spe),
        };
        on_epoch(&log);
        history.push(log);
        if let Some(r) = report {
            if best.as_ref().is_none_or(|(d, _)| r.dice > *d) {
                let rng_state = RngState { seed: cfg.seed, epoch };
                best = Some((r.dice, Checkpoint::new(params.clone(), opt.iter, rng_state, history.clone())));
            }
        }
        if let Some(dir) = out {
            write_metrics(dir, &history)?;
        }
    }

    let rng_state = RngState {
        seed: cfg.seed,
        epoch: cfg.epochs,
    };
    let last = Checkpoint::new(params, opt.iter, rng_state, history.clone());
    let best = best.map_or_else(|| last.clone(), |(_, c)| c);
    if let Some(dir) = out {
        best.save(&dir.join(CHECKPOINT_DIR))?;
    }
    Ok(TrainOutcome { best, last, history })
}

/// Writes `metrics.csv` with one row per epoch.
pub fn write_metrics(dir: &Path, history: &[EpochLog]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(METRICS_FILE);
    let csv_err = |source| Error::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    for row in history {
        w.serialize(row).map_err(csv_err)?;
    }
    if history.is_empty() {
        w.write_record([
            "epoch", "lr", "loss_seg", "loss_inp", "val_dice", "val_iou", "val_acc", "val_rec", "val_spe",
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(&path))
}

/// Eval-mode outputs of a batch, as plain tensors.
#[derive(Clone, Debug)]
pub struct Inference {
    pub y_coarse: Tensor<f32>,
    pub mask_coarse: Tensor<f32>,
    pub x_mask: Tensor<f32>,
    /// Layer-1 fine segmentation probabilities.
    pub y_fine: Tensor<f32>,
    /// Layer-1 reconstruction.
    pub x_hat: Tensor<f32>,
}

/// Eval-mode two-stage pass over `[batch, 3, size, size]` images.
pub fn infer(params: &mut NetworkParams<f32>, x: &Tensor<f32>, policy: &BinarizePolicy) -> Result<Inference> {
    let (net, mut s) = params.session(Mode::EVAL);
    let out = two_stage(net, &mut s, x, policy)?;
    let g = &s.graph;
    Ok(Inference {
        y_coarse: g.value(out.y_coarse).clone(),
        mask_coarse: out.mask_coarse,
        x_mask: out.x_mask,
        y_fine: g.value(out.y_fine[0]).clone(),
        x_hat: g.value(out.x_hat[0]).clone(),
    })
}

/// Per-image metrics and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean: MetricReport,
    pub per_image: Vec<(String, MetricReport)>,
}

/// Scores the binarized layer-1 fine prediction of every sample against its
/// mask at the network input size. Every sample needs a mask.
pub fn evaluate(params: &mut NetworkParams<f32>, samples: &[SegSample], policy: &BinarizePolicy) -> Result<EvalReport> {
    let side = params.net.cfg().input_size;
    let prepared: Vec<SegSample> = samples.iter().map(|s| prepare(s, side)).collect();
    let mut per_image = Vec::with_capacity(samples.len());
    for chunk in prepared.chunks(EVAL_BATCH) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let gt: Tensor<f32> = mask_batch(&refs)?;
        let x = image_batch(&refs)?;
        let pred = policy.binarize(&infer(params, &x, policy)?.y_fine);
        for (i, s) in chunk.iter().enumerate() {
            let report = confusion_metrics(&pred.select_batch(&[i])?, &gt.select_batch(&[i])?)?;
            per_image.push((s.id.clone(), report));
        }
    }
    let reports: Vec<MetricReport> = per_image.iter().map(|(_, r)| *r).collect();
    Ok(EvalReport {
        mean: MetricReport::mean(&reports),
        per_image,
    })
}

/// Single-image outputs at the image's own resolution.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub y_coarse: Raster,
    pub y_fine: Raster,
    /// Input with the binarized fine prediction tinted green.
    pub overlay: Raster,
    pub x_mask: Raster,
    pub x_hat: Raster,
}

pub fn predict(params: &mut NetworkParams<f32>, image: &Raster, policy: &BinarizePolicy) -> Result<Prediction> {
    if image.channels != 3 {
        return Err(Error::Invalid(format!("predict needs an RGB image, got {} channels", image.channels)));
    }
    let side = params.net.cfg().input_size;
    let sample = SegSample {
        id: String::new(),
        image: image.clone(),
        mask: None,
        is_labeled: false,
    };
    let x = image_batch(&[&prepare(&sample, side)])?;
    let inf = infer(params, &x, policy)?;
    let (h, w) = (image.height, image.width);
    let back = |t: &Tensor<f32>| -> Result<Raster> {
        let r = Raster::from_tensor(t, 0)?;
        Ok(if (r.height, r.width) == (h, w) { r } else { r.resize_bilinear(h, w) })
    };
    let y_fine = back(&inf.y_fine)?;
    let threshold = policy.threshold as f32;
    let mut overlay = image.clone();
    for i in 0..h * w {
        if y_fine.data[i] >= threshold {
            for (c, tint) in [0.0, 1.0, 0.0].into_iter().enumerate() {
                let v = &mut overlay.data[3 * i + c];
                *v = 0.6 * *v + 0.4 * tint;
            }
        }
    }
    Ok(Prediction {
        y_coarse: back(&inf.y_coarse)?,
        y_fine,
        overlay,
        x_mask: back(&inf.x_mask)?,
        x_hat: back(&inf.x_hat)?,
    })
}
