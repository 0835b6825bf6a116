//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, which is already a
//! topological order. [`Graph::backward`] walks the tape once in reverse.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, BnRunning, ConvGeom, UpsampleMode};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Abs(Var),
    Clamp {
        input: Var,
        lo: T,
        hi: T,
    },
    Affine {
        input: Var,
        scale: T,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    ConcatChannels(Var, Var),
    Upsample {
        input: Var,
        mode: UpsampleMode,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    BatchSum(Var),
    SelectBatch {
        input: Var,
        indices: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    op: Op<T>,
}

/// Recorded computation. Values are immutable once pushed; only gradient
/// slots change, and only during [`Graph::backward`].
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Leaves with `requires_grad` receive a gradient
    /// from [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        let value = value.ensure_finite("leaf")?;
        Ok(self.push_raw(value, requires_grad, Op::Leaf))
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the loss with respect to a leaf, after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    fn push_raw(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, requires_grad, op))
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Invalid(format!("variable {} not on this graph", v.0)))
        }
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(
            self.value(input).shape(),
            self.value(kernel).shape(),
            bias.map(|b| self.value(b).shape()),
            stride,
            pad,
        )?;
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            "conv2d",
            out,
            &inputs,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        )
    }

    /// Batch normalization. `running` is read in eval mode and updated in
    /// train mode.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &mut BnRunning<T>,
        train: bool,
        momentum: T,
        eps: T,
    ) -> Result<Var> {
        let fwd = kernels::batch_norm_forward(
            self.value(input),
            self.value(gamma).data(),
            self.value(beta).data(),
            running,
            train,
            momentum,
            eps,
        )?;
        let needs = [input, gamma, beta].iter().any(|&v| self.requires_grad(v));
        let (xhat, inv_std) = if needs {
            (fwd.xhat, fwd.inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        self.push(
            "batch_norm",
            fwd.output,
            &[input, gamma, beta],
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", out, &[a], Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid_scalar);
        self.push("sigmoid", out, &[a], Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.ln());
        self.push("ln", out, &[a], Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.abs());
        self.push("abs", out, &[a], Op::Abs(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping applied.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(lo).min(hi));
        self.push("clamp", out, &[a], Op::Clamp { input: a, lo, hi })
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Result<Var> {
        let out = self.value(a).map(|v| scale * v + shift);
        self.push("affine", out, &[a], Op::Affine { input: a, scale })
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -T::one(), T::one())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push("add", out, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push("sub", out, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push("mul", out, &[a, b], Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "div", |x, y| x / y)?;
        self.push("div", out, &[a, b], Op::Div(a, b))
    }

    /// Concatenation along the channel axis of two 4-d tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = self.value(a).dims4()?;
        let (bb, cb, hb, wb) = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(shape_err(
                "concat",
                format!(
                    "non-channel dims differ: {:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let hw = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba * (ca + cb) * hw);
        for n in 0..ba {
            out.extend_from_slice(&da[n * ca * hw..(n + 1) * ca * hw]);
            out.extend_from_slice(&db[n * cb * hw..(n + 1) * cb * hw]);
        }
        let out = Tensor::new([ba, ca + cb, ha, wa], out)?;
        self.push("concat", out, &[a, b], Op::ConcatChannels(a, b))
    }

    pub fn upsample2x(&mut self, a: Var, mode: UpsampleMode) -> Result<Var> {
        let out = kernels::upsample2x(self.value(a), mode)?;
        self.push("upsample2x", out, &[a], Op::Upsample { input: a, mode })
    }

    pub fn maxpool2x(&mut self, a: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2x(self.value(a))?;
        self.push("maxpool2x", out, &[a], Op::MaxPool2 { input: a, argmax })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, &[a], Op::Sum(a))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(shape_err("mean", "mean of an empty tensor"));
        }
        let out = Tensor::scalar(t.sum() / T::from_usize(t.len()).unwrap());
        self.push("mean", out, &[a], Op::Mean(a))
    }

    /// Sums every sample over all non-batch axes, giving shape `[batch]`.
    pub fn batch_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let b = *t
            .shape()
            .first()
            .ok_or_else(|| shape_err("batch_sum", "scalar has no batch axis"))?;
        let per = t.len().checked_div(b).unwrap_or(0);
        let sums = (0..b)
            .map(|i| t.data()[i * per..(i + 1) * per].iter().copied().sum())
            .collect();
        let out = Tensor::new([b], sums)?;
        self.push("batch_sum", out, &[a], Op::BatchSum(a))
    }

    /// Gathers samples along the leading axis.
    pub fn select_batch(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let out = self.value(a).select_batch(indices)?;
        self.push(
            "select_batch",
            out,
            &[a],
            Op::SelectBatch {
                input: a,
                indices: indices.to_vec(),
            },
        )
    }

    /// Populates gradients of `loss` on every `requires_grad` leaf.
    ///
    /// Leaves the loss does not depend on get a zero gradient. Calling this a
    /// second time on the same graph is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_var(loss)?;
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.value(loss).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_done = true;
        if !self.requires_grad(loss) {
            self.zero_unreached_leaves();
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::ones(shape));

        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(idx, &grad)?;
            for (var, g) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                let slot = &mut self.nodes[var.0].grad;
                match slot {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    None => *slot = Some(g),
                }
            }
        }
        self.zero_unreached_leaves();
        for node in &self.nodes {
            if let Some(g) = &node.grad {
                if !g.is_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    fn zero_unreached_leaves(&mut self) {
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.requires_grad && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, idx: usize, grad: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let dy = grad.data();
        let like = |v: Var, data: Vec<T>| -> Result<Tensor<T>> {
            Tensor::new(self.value(v).shape().to_vec(), data)
        };
        let elementwise = |v: Var, f: &dyn Fn(usize, T) -> T| -> Result<(Var, Tensor<T>)> {
            let data = dy.iter().enumerate().map(|(i, &g)| f(i, g)).collect();
            Ok((v, like(v, data)?))
        };
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let grads = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    dy,
                    self.wants(*input),
                    self.wants(*kernel),
                    bias.is_some_and(|b| self.wants(b)),
                );
                if let Some(d) = grads.input {
                    out.push((*input, like(*input, d)?));
                }
                if let Some(d) = grads.kernel {
                    out.push((*kernel, like(*kernel, d)?));
                }
                if let (Some(b), Some(d)) = (bias, grads.bias) {
                    out.push((*b, like(*b, d)?));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (dx, dgamma, dbeta) = kernels::batch_norm_backward(
                    self.value(*input).shape(),
                    self.value(*gamma).data(),
                    xhat,
                    inv_std,
                    dy,
                    *train,
                );
                out.push((*input, like(*input, dx)?));
                out.push((*gamma, like(*gamma, dgamma)?));
                out.push((*beta, like(*beta, dbeta)?));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                out.push(elementwise(*a, &|i, g| if x[i] > T::zero() { g } else { T::zero() })?);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                out.push(elementwise(*a, &|i, g| g * y[i] * (T::one() - y[i]))?);
            }
            Op::Ln(a) => {
                let x = self.value(*a).data();
                out.push(elementwise(*a, &|i, g| g / x[i])?);
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                out.push(elementwise(*a, &|i, g| g * sign(x[i]))?);
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.value(*input).data();
                out.push(elementwise(*input, &|i, g| {
                    if x[i] < *lo || x[i] > *hi {
                        T::zero()
                    } else {
                        g
                    }
                })?);
            }
            Op::Affine { input, scale } => {
                out.push(elementwise(*input, &|_, g| g * *scale)?);
            }
            Op::Add(a, b) => {
                out.push((*a, grad.clone()));
                out.push((*b, grad.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, grad.clone()));
                out.push(elementwise(*b, &|_, g| -g)?);
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    out.push(elementwise(*a, &|i, g| g * xb[i])?);
                }
                if self.wants(*b) {
                    out.push(elementwise(*b, &|i, g| g * xa[i])?);
                }
            }
            Op::Div(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    out.push(elementwise(*a, &|i, g| g / xb[i])?);
                }
                if self.wants(*b) {
                    out.push(elementwise(*b, &|i, g| -g * xa[i] / (xb[i] * xb[i]))?);
                }
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4()?;
                let cb = self.value(*b).shape()[1];
                let hw = h * w;
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                for s in 0..n {
                    let base = s * (ca + cb) * hw;
                    ga.extend_from_slice(&dy[base..base + ca * hw]);
                    gb.extend_from_slice(&dy[base + ca * hw..base + (ca + cb) * hw]);
                }
                out.push((*a, like(*a, ga)?));
                out.push((*b, like(*b, gb)?));
            }
            Op::Upsample { input, mode } => {
                let d = kernels::upsample2x_backward(self.value(*input).shape(), dy, *mode);
                out.push((*input, like(*input, d)?));
            }
            Op::MaxPool2 { input, argmax } => {
                let mut d = vec![T::zero(); self.value(*input).len()];
                for (&src, &g) in argmax.iter().zip(dy) {
                    d[src] = d[src] + g;
                }
                out.push((*input, like(*input, d)?));
            }
            Op::Sum(a) => {
                let g = dy[0];
                out.push((*a, Tensor::full(self.value(*a).shape().to_vec(), g)));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let g = dy[0] / T::from_usize(t.len()).unwrap();
                out.push((*a, Tensor::full(t.shape().to_vec(), g)));
            }
            Op::BatchSum(a) => {
                let t = self.value(*a);
                let b = t.shape()[0];
                let per = t.len().checked_div(b).unwrap_or(0);
                out.push(elementwise_len(*a, t, |i| dy[i / per])?);
            }
            Op::SelectBatch { input, indices } => {
                let t = self.value(*input);
                let per = t.len() / t.shape()[0];
                let mut d = vec![T::zero(); t.len()];
                for (k, &src) in indices.iter().enumerate() {
                    for j in 0..per {
                        d[src * per + j] = d[src * per + j] + dy[k * per + j];
                    }
                }
                out.push((*input, like(*input, d)?));
            }
        }
        Ok(out)
    }
}

fn elementwise_len<T: Element>(
    v: Var,
    like: &Tensor<T>,
    f: impl Fn(usize) -> T,
) -> Result<(Var, Tensor<T>)> {
    let data = (0..like.len()).map(f).collect();
    Ok((v, Tensor::new(like.shape().to_vec(), data)?))
}

fn sign<T: Element>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
