//! Stateful layer wrappers that cache forward inputs for backprop.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, BnCache, BnState, ConvParams};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for BN, forward values cached for backward.
    Train,
    /// Running statistics, nothing cached.
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Learnable,
    /// Non-learnable state that still belongs in checkpoints (BN running stats).
    Buffer,
}

pub type ParamVisitor<'a, T> = dyn FnMut(&str, ParamKind, &mut Tensor<T>) + 'a;

/// Anything owning named tensors.
pub trait Module<T: Real> {
    /// Calls `f` for every tensor with its dotted name under `prefix`.
    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>);

    fn param_count(&mut self) -> usize {
        let mut total = 0;
        self.visit("", &mut |_, kind, t| {
            if kind == ParamKind::Learnable {
                total += t.len();
            }
        });
        total
    }

    fn zero_grad(&mut self) {
        self.visit("", &mut |_, _, t| t.zero_grad());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn missing_cache(layer: &str) -> Error {
    Error::Numeric(format!("{layer}: backward called without a training-mode forward"))
}

/// He-normal initialization with fan-out, `std = sqrt(2 / (out_c * k_h * k_w))`.
pub fn he_normal_fan_out<T: Real, R: Rng + ?Sized>(dims: [usize; 4], rng: &mut R) -> Tensor<T> {
    let fan_out = dims[0] * dims[2] * dims[3];
    Tensor::randn(dims, (2.0 / fan_out.max(1) as f64).sqrt(), rng).with_grad()
}

/// He-normal initialization with fan-in, used for fully connected weights.
pub fn he_normal_fan_in<T: Real, R: Rng + ?Sized>(dims: [usize; 4], rng: &mut R) -> Tensor<T> {
    let fan_in = dims[1] * dims[2] * dims[3];
    Tensor::randn(dims, (2.0 / fan_in.max(1) as f64).sqrt(), rng).with_grad()
}

#[derive(Clone, Debug)]
pub struct Conv2d<T = f32> {
    pub params: ConvParams<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Conv2d<T> {
    /// Bias-free convolution with He-normal weights.
    pub fn new<R: Rng + ?Sized>(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        Self::from_params(ConvParams::new(
            he_normal_fan_out([out_c, in_c, kernel, kernel], rng),
            None,
            stride,
            padding,
        ))
    }

    pub fn from_params(params: ConvParams<T>) -> Self {
        Conv2d { params, input: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = ops::conv2d(x, &self.params)?;
        self.input = mode.is_train().then(|| x.detached());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing_cache("conv2d"))?;
        ops::conv2d_backward(&x, &mut self.params, dy)
    }

    pub fn out_channels(&self) -> usize {
        self.params.out_channels()
    }

    pub fn in_channels(&self) -> usize {
        self.params.in_channels()
    }

    /// Multiply-accumulates for one sample at the given input size.
    pub fn macs(&self, h: usize, w: usize) -> Result<(u64, usize, usize)> {
        let (kh, kw) = self.params.kernel();
        let oh = ops::conv_out_size(h, kh, self.params.stride, self.params.padding)?;
        let ow = ops::conv_out_size(w, kw, self.params.stride, self.params.padding)?;
        let per_out = (self.in_channels() * kh * kw) as u64;
        Ok((per_out * (self.out_channels() * oh * ow) as u64, oh, ow))
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "weight"), ParamKind::Learnable, &mut self.params.weight);
        if let Some(b) = self.params.bias.as_mut() {
            f(&join(prefix, "bias"), ParamKind::Learnable, b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T = f32> {
    pub state: BnState<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            state: BnState::new(channels),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.state.training = mode.is_train();
        let (y, cache) = ops::batch_norm(x, &mut self.state)?;
        self.cache = mode.is_train().then_some(cache);
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("batch_norm"))?;
        ops::batch_norm_backward(&cache, &mut self.state, dy)
    }

    pub fn channels(&self) -> usize {
        self.state.channels()
    }
}

impl<T: Real> Module<T> for BatchNorm<T> {
    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "gamma"), ParamKind::Learnable, &mut self.state.gamma);
        f(&join(prefix, "beta"), ParamKind::Learnable, &mut self.state.beta);
        f(&join(prefix, "running_mean"), ParamKind::Buffer, &mut self.state.running_mean);
        f(&join(prefix, "running_var"), ParamKind::Buffer, &mut self.state.running_var);
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(fin: usize, fout: usize, bias: bool, rng: &mut R) -> Self {
        Linear {
            weight: he_normal_fan_in([fout, fin, 1, 1], rng),
            bias: bias.then(|| Tensor::zeros([1, fout, 1, 1]).with_grad()),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = ops::linear(x, &self.weight, self.bias.as_ref())?;
        self.input = mode.is_train().then(|| x.detached());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing_cache("linear"))?;
        ops::linear_backward(&x, &mut self.weight, self.bias.as_mut(), dy)
    }

    pub fn in_features(&self) -> usize {
        self.weight.c()
    }

    pub fn out_features(&self) -> usize {
        self.weight.n()
    }

    pub fn macs(&self) -> u64 {
        (self.in_features() * self.out_features()) as u64
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "weight"), ParamKind::Learnable, &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(&join(prefix, "bias"), ParamKind::Learnable, b);
        }
    }
}

/// Conv -> BN -> ReLU, the unit every bottleneck is built from.
#[derive(Clone, Debug)]
pub struct ConvBnRelu<T = f32> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
    output: Option<Tensor<T>>,
}

impl<T: Real> ConvBnRelu<T> {
    pub fn new(conv: Conv2d<T>) -> Self {
        let bn = BatchNorm::new(conv.out_channels());
        ConvBnRelu {
            conv,
            bn,
            output: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.conv.forward(x, mode)?;
        let mut y = self.bn.forward(&y, mode)?;
        ops::elementwise::relu_in_place(&mut y);
        self.output = mode.is_train().then(|| y.detached());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.output.take().ok_or_else(|| missing_cache("relu"))?;
        let d = ops::relu_backward(&y, dy)?;
        let d = self.bn.backward(&d)?;
        self.conv.backward(&d)
    }
}

impl<T: Real> Module<T> for ConvBnRelu<T> {
    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}
