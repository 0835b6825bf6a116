//! Named parameter storage, forward sessions and the basic layers built on
//! top of [`Graph`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::BnRunning;
use crate::tensor::{Element, Tensor};

/// Role of a stored tensor. Running statistics are buffers, not trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, Self::BnRunningMean | Self::BnRunningVar)
    }

    /// Weight decay touches convolution kernels only.
    pub fn decays(self) -> bool {
        matches!(self, Self::ConvWeight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Index into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Flat, ordered list of every tensor a model owns. The order is fixed by the
/// architecture and is the serialization order of checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Invalid(format!("no parameter named `{name}`")))?;
        Ok(self.get_mut(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.trainable())
            .map(|e| e.value.len())
            .sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                })
                .collect(),
        }
    }
}

/// Creates parameters in a fixed order from a seeded generator.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Element> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He (fan-in) normal kernel, zero bias.
    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Conv {
        let fan_in = cin * k * k;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let rng = &mut self.rng;
        let w = Tensor::from_fn([cout, cin, k, k], |_| T::from_f64_lossy(normal.sample(rng)));
        let weight = self.store.push(format!("{name}.weight"), ParamKind::ConvWeight, w);
        let bias = bias.then(|| {
            self.store
                .push(format!("{name}.bias"), ParamKind::ConvBias, Tensor::zeros([cout]))
        });
        Conv {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> BatchNorm {
        let s = &mut *self.store;
        let gamma = s.push(format!("{name}.gamma"), ParamKind::BnGamma, Tensor::ones([channels]));
        let beta = s.push(format!("{name}.beta"), ParamKind::BnBeta, Tensor::zeros([channels]));
        let running = ["", "aux_"].map(|prefix| RunningStats {
            mean: s.push(
                format!("{name}.{prefix}running_mean"),
                ParamKind::BnRunningMean,
                Tensor::zeros([channels]),
            ),
            var: s.push(
                format!("{name}.{prefix}running_var"),
                ParamKind::BnRunningVar,
                Tensor::ones([channels]),
            ),
        });
        BatchNorm { gamma, beta, running }
    }
}

/// Whether a forward pass updates batch-norm statistics and whether
/// parameters are recorded for differentiation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    pub train: bool,
    pub grad: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode {
        train: true,
        grad: true,
    };
    pub const EVAL: Mode = Mode {
        train: false,
        grad: false,
    };
}

/// Batch-norm hyperparameters shared by every layer of a network.
#[derive(Clone, Copy, Debug)]
pub struct BnSettings {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BnSettings {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// One forward (and optionally backward) pass over a parameter store.
///
/// Each parameter enters the graph as a single leaf the first time it is
/// used; every later use refers to the same leaf, so shared weights
/// accumulate gradient from all of their uses.
pub struct Session<'p, T> {
    pub graph: Graph<T>,
    store: &'p mut ParamStore<T>,
    vars: Vec<Option<Var>>,
    mode: Mode,
    bn: BnSettings,
    stream: BnStream,
}

impl<'p, T: Element> Session<'p, T> {
    pub fn new(store: &'p mut ParamStore<T>, mode: Mode, bn: BnSettings) -> Self {
        let n = store.len();
        Self {
            graph: Graph::new(),
            store,
            vars: vec![None; n],
            mode,
            bn,
            stream: BnStream::Primary,
        }
    }

    /// Selects the running statistics later batch-norm calls use; returns
    /// the previous choice.
    pub fn set_bn_stream(&mut self, stream: BnStream) -> BnStream {
        std::mem::replace(&mut self.stream, stream)
    }

    pub fn bn_stream(&self) -> BnStream {
        self.stream
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Graph leaf for a parameter.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.vars[id.0] {
            return Ok(v);
        }
        let entry = &self.store.entries()[id.0];
        let grad = self.mode.grad && entry.kind.trainable();
        let v = self.graph.leaf(entry.value.clone(), grad)?;
        self.vars[id.0] = Some(v);
        Ok(v)
    }

    /// Leaf of a parameter if it was used in this session.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.graph.constant(t)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)
    }

    /// Gradients for every stored entry, `None` where the entry is not
    /// trainable or never entered the graph.
    pub fn take_grads(&mut self) -> Vec<Option<Tensor<T>>> {
        let mut out = Vec::with_capacity(self.vars.len());
        for (i, v) in self.vars.iter().enumerate() {
            let trainable = self.store.entries()[i].kind.trainable();
            out.push(match v {
                Some(v) if trainable => self.graph.take_grad(*v),
                _ => None,
            });
        }
        out
    }

    fn batch_norm(&mut self, bn: &BatchNorm, x: Var) -> Result<Var> {
        let gamma = self.param(bn.gamma)?;
        let beta = self.param(bn.beta)?;
        let stats = bn.running[self.stream as usize];
        let mut running = BnRunning {
            mean: self.store.get(stats.mean).data().to_vec(),
            var: self.store.get(stats.var).data().to_vec(),
        };
        let out = self.graph.batch_norm(
            x,
            gamma,
            beta,
            &mut running,
            self.mode.train,
            T::from_f64_lossy(self.bn.momentum),
            T::from_f64_lossy(self.bn.eps),
        )?;
        if self.mode.train {
            self.store
                .get_mut(stats.mean)
                .data_mut()
                .copy_from_slice(&running.mean);
            self.store
                .get_mut(stats.var)
                .data_mut()
                .copy_from_slice(&running.var);
        }
        Ok(out)
    }
}

/// Convolution layer: parameter handles plus geometry.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight)?;
        let b = self.bias.map(|b| s.param(b)).transpose()?;
        s.graph.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Which running statistics a batch-norm call reads in eval mode and
/// updates in train mode.
///
/// Weights are shared between the passes of the two-stage forward, but the
/// activations they see are not distributed alike: the masked image lacks the
/// lesion, and the coarse decoder receives raw encoder features where the
/// fine decoder receives fused ones. Those passes use `Auxiliary` so that
/// eval-mode normalization matches what each pass saw in training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BnStream {
    #[default]
    Primary = 0,
    Auxiliary = 1,
}

#[derive(Clone, Copy, Debug)]
pub struct RunningStats {
    pub mean: ParamId,
    pub var: ParamId,
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Indexed by [`BnStream`].
    pub running: [RunningStats; 2],
}

impl BatchNorm {
    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        s.batch_norm(self, x)
    }
}

/// Conv (no bias) -> BN -> ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn build<T: Element>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        Self {
            conv: b.conv(&format!("{name}.conv"), cin, cout, k, stride, k / 2, false),
            bn: b.batch_norm(&format!("{name}.bn"), cout),
        }
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        s.graph.relu(y)
    }
}

/// Residual basic block: two 3x3 conv-BN with an identity or 1x1 projection
/// shortcut.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: ConvBnRelu,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub shortcut: Option<(Conv, BatchNorm)>,
}

impl BasicBlock {
    pub fn build<T: Element>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let conv1 = ConvBnRelu::build(b, &format!("{name}.1"), cin, cout, 3, stride);
        let conv2 = b.conv(&format!("{name}.2.conv"), cout, cout, 3, 1, 1, false);
        let bn2 = b.batch_norm(&format!("{name}.2.bn"), cout);
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                b.conv(&format!("{name}.down.conv"), cin, cout, 1, stride, 0, false),
                b.batch_norm(&format!("{name}.down.bn"), cout),
            )
        });
        Self {
            conv1,
            conv2,
            bn2,
            shortcut,
        }
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(s, x)?;
        let y = self.conv2.forward(s, y)?;
        let y = self.bn2.forward(s, y)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let z = conv.forward(s, x)?;
                bn.forward(s, z)?
            }
            None => x,
        };
        let sum = s.graph.add(y, skip)?;
        s.graph.relu(sum)
    }
}
