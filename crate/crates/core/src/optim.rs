//! SGD with momentum and L2 weight decay, plus the poly learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Element, Tensor};

/// Optimizer hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub init_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Exponent of the poly schedule.
    pub power: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            init_lr: 0.001,
            momentum: 0.9,
            weight_decay: 1e-5,
            power: 0.9,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.init_lr > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.power >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "optimizer needs init_lr > 0, momentum in [0, 1), weight_decay >= 0, power >= 0; got {self:?}"
            )))
        }
    }
}

/// `init_lr * (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: u64, max_iter: u64, init_lr: f64, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::Invalid("poly_lr needs max_iter > 0".into()));
    }
    if iter > max_iter {
        return Err(Error::Invalid(format!("iteration {iter} beyond max_iter {max_iter}")));
    }
    Ok(init_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// Momentum buffers and the step counter.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub cfg: OptimConfig,
    pub iter: u64,
    pub max_iter: u64,
    buffers: Vec<Option<Tensor<T>>>,
}

impl<T: Element> OptimState<T> {
    pub fn new(cfg: OptimConfig, max_iter: u64) -> Result<Self> {
        cfg.validate()?;
        if max_iter == 0 {
            return Err(Error::Invalid("max_iter must be positive".into()));
        }
        Ok(Self {
            cfg,
            iter: 0,
            max_iter,
            buffers: Vec::new(),
        })
    }

    /// Learning rate for the next step.
    pub fn current_lr(&self) -> Result<f64> {
        poly_lr(self.iter, self.max_iter, self.cfg.init_lr, self.cfg.power)
    }

    pub fn buffer(&self, index: usize) -> Option<&Tensor<T>> {
        self.buffers.get(index).and_then(Option::as_ref)
    }
}

/// One SGD step over every trainable entry of `store`.
///
/// `g' = g + wd * p` (conv weights only), `buf = momentum * buf + g'`,
/// `p -= lr * buf`. `grads` is indexed like the store entries. Does not
/// advance `state.iter`.
pub fn sgd_update<T: Element>(
    store: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    lr: f64,
    state: &mut OptimState<T>,
) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::Invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    state.buffers.resize(store.len(), None);
    let lr = T::from_f64_lossy(lr);
    let momentum = T::from_f64_lossy(state.cfg.momentum);
    let wd = T::from_f64_lossy(state.cfg.weight_decay);
    for (i, entry) in store.entries_mut().iter_mut().enumerate() {
        if !entry.kind.trainable() {
            continue;
        }
        let g = grads[i]
            .as_ref()
            .ok_or_else(|| Error::MissingGrad(entry.name.clone()))?;
        g.expect_same_shape(&entry.value, "sgd_update")?;
        let decay = if entry.kind.decays() { wd } else { T::zero() };
        let buf = state.buffers[i].get_or_insert_with(|| Tensor::zeros(entry.value.shape().to_vec()));
        for ((p, &g), b) in entry
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(buf.data_mut())
        {
            *b = momentum * *b + g + decay * *p;
            *p = *p - lr * *b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    fn store(kind: ParamKind, value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.push("w".into(), kind, Tensor::full([2], value));
        s
    }

    fn state(momentum: f64, weight_decay: f64) -> OptimState<f64> {
        let cfg = OptimConfig {
            momentum,
            weight_decay,
            ..Default::default()
        };
        OptimState::new(cfg, 10).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(poly_lr(0, 100, 0.001, 0.9).unwrap(), 0.001);
        assert_eq!(poly_lr(100, 100, 0.001, 0.9).unwrap(), 0.0);
        assert!(poly_lr(0, 0, 0.001, 0.9).is_err());
        assert!(poly_lr(101, 100, 0.001, 0.9).is_err());
    }

    #[test]
    fn vanilla_step() {
        let mut s = store(ParamKind::ConvWeight, 1.0);
        let mut st = state(0.0, 0.0);
        let g = Tensor::new([2], vec![0.5, -1.0]).unwrap();
        sgd_update(&mut s, &[Some(g)], 0.1, &mut st).unwrap();
        assert_eq!(s.entries()[0].value.data(), &[0.95, 1.1]);
    }

    #[test]
    fn decay_only_shrinks_conv_weights() {
        let mut st = state(0.0, 0.1);
        let mut s = store(ParamKind::ConvWeight, 2.0);
        sgd_update(&mut s, &[Some(Tensor::zeros([2]))], 0.5, &mut st).unwrap();
        assert!((s.entries()[0].value.data()[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-15);

        let mut st = state(0.0, 0.1);
        let mut s = store(ParamKind::BnGamma, 2.0);
        sgd_update(&mut s, &[Some(Tensor::zeros([2]))], 0.5, &mut st).unwrap();
        assert_eq!(s.entries()[0].value.data()[0], 2.0);
    }

    #[test]
    fn two_momentum_steps_total_2_9g() {
        let mut s = store(ParamKind::ConvWeight, 0.0);
        let mut st = state(0.9, 0.0);
        let g = Tensor::full([2], 1.0);
        sgd_update(&mut s, &[Some(g.clone())], 1.0, &mut st).unwrap();
        sgd_update(&mut s, &[Some(g)], 1.0, &mut st).unwrap();
        assert!((s.entries()[0].value.data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_named() {
        let mut s = store(ParamKind::ConvWeight, 0.0);
        let err = sgd_update(&mut s, &[None], 1.0, &mut state(0.9, 0.0)).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "w"));
    }

    #[test]
    fn running_stats_are_skipped() {
        let mut s = store(ParamKind::BnRunningMean, 3.0);
        sgd_update(&mut s, &[None], 1.0, &mut state(0.9, 0.1)).unwrap();
        assert_eq!(s.entries()[0].value.data()[0], 3.0);
    }
}
