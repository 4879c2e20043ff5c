//! Baseline blocks: embedded-Gaussian non-local attention and
//! squeeze-excitation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{join, missing_cache, BatchNorm, Conv2d, Linear, Mode, Module, ParamVisitor};
use crate::ops::{self, PoolMode};
use crate::spatial_bias::{sb_param_count, SbConfig};
use crate::tensor::{Real, Tensor};

pub const SE_REDUCTION: usize = 16;

/// Closed-form parameter accounting for the insertable blocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockConfig {
    Nl,
    NlCompressed { size: usize },
    Se { reduction: usize },
    Sb(SbConfig),
}

/// Parameters added by one block operating on `channels` input channels.
pub fn block_param_count(block: &BlockConfig, channels: usize) -> usize {
    match block {
        // theta, phi, g, w_z are bias-free 1x1 convs; BN carries gamma and beta
        BlockConfig::Nl | BlockConfig::NlCompressed { .. } => 4 * channels * (channels / 2) + 2 * channels,
        BlockConfig::Se { reduction } => 2 * channels * (channels / reduction),
        BlockConfig::Sb(cfg) => sb_param_count(channels, cfg),
    }
}

struct NlCache<T> {
    theta: Tensor<T>,
    phi: Tensor<T>,
    g: Tensor<T>,
    phi_full: Tensor<T>,
    g_full: Tensor<T>,
    attn: Tensor<T>,
}

/// `x + BN(W_z(softmax(theta^T phi) g))` over flattened positions. With
/// `compress_to = Some(s)`, keys and values are average-pooled to `s x s`.
pub struct NlBlock<T = f32> {
    pub theta: Conv2d<T>,
    pub phi: Conv2d<T>,
    pub g: Conv2d<T>,
    pub w_z: Conv2d<T>,
    pub bn_z: BatchNorm<T>,
    pub compress_to: Option<usize>,
    cache: Option<NlCache<T>>,
}

impl<T: Real> NlBlock<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, compress_to: Option<usize>, rng: &mut R) -> Result<Self> {
        if channels == 0 || channels % 2 != 0 {
            return Err(Error::config(format!(
                "non-local block needs an even channel count, got {channels}"
            )));
        }
        if compress_to == Some(0) {
            return Err(Error::config("non-local compression size must be positive"));
        }
        let inner = channels / 2;
        let mut bn_z = BatchNorm::new(channels);
        bn_z.state.gamma.data_mut().iter_mut().for_each(|v| *v = T::zero());
        Ok(NlBlock {
            theta: Conv2d::new(channels, inner, 1, 1, 0, rng),
            phi: Conv2d::new(channels, inner, 1, 1, 0, rng),
            g: Conv2d::new(channels, inner, 1, 1, 0, rng),
            w_z: Conv2d::new(inner, channels, 1, 1, 0, rng),
            bn_z,
            compress_to,
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_z.out_channels()
    }

    fn as_matrix(t: Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = t.dims();
        t.reshape([n, 1, c, h * w])
    }

    fn compress(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        match self.compress_to {
            Some(s) => ops::adaptive_pool(t, s.min(t.h()), s.min(t.w()), PoolMode::Average),
            None => Ok(t.detached()),
        }
    }

    /// Attention weights `(n, 1, HW, M)` for `x`, rows summing to one.
    pub fn attention(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let theta = Self::as_matrix(self.theta.forward(x, Mode::Eval)?)?;
        let phi_full = self.phi.forward(x, Mode::Eval)?;
        let phi = Self::as_matrix(self.compress(&phi_full)?)?;
        Ok(ops::softmax_rows(&ops::matmul(&theta, &phi, true, false)?))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.c() != self.channels() {
            return Err(Error::dim(
                "nl_forward",
                format!("input has {} channels, block expects {}", x.c(), self.channels()),
            ));
        }
        let [n, _, h, w] = x.dims();
        let inner = self.channels() / 2;
        let theta = Self::as_matrix(self.theta.forward(x, mode)?)?;
        let phi_full = self.phi.forward(x, mode)?;
        let g_full = self.g.forward(x, mode)?;
        let phi = Self::as_matrix(self.compress(&phi_full)?)?;
        let g = Self::as_matrix(self.compress(&g_full)?)?;
        let attn = ops::softmax_rows(&ops::matmul(&theta, &phi, true, false)?);
        let y = ops::matmul(&g, &attn, false, true)?.reshape([n, inner, h, w])?;
        let z = self.w_z.forward(&y, mode)?;
        let z = self.bn_z.forward(&z, mode)?;
        let out = ops::add(x, &z)?;
        self.cache = mode.is_train().then_some(NlCache {
            theta,
            phi,
            g,
            phi_full,
            g_full,
            attn,
        });
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.cache.take().ok_or_else(|| missing_cache("non_local"))?;
        let dz = self.bn_z.backward(dy)?;
        let d_y = Self::as_matrix(self.w_z.backward(&dz)?)?;
        let (d_g, d_attn) = ops::matmul_backward(&c.g, &c.attn, false, true, &d_y)?;
        let d_logits = ops::softmax_rows_backward(&c.attn, &d_attn)?;
        let (d_theta, d_phi) = ops::matmul_backward(&c.theta, &c.phi, true, false, &d_logits)?;
        let unflatten = |d: Tensor<T>, like: &Tensor<T>| -> Result<Tensor<T>> {
            let [n, ch, h, w] = like.dims();
            match self.compress_to {
                Some(s) => {
                    let (sh, sw) = (s.min(h), s.min(w));
                    let d = d.reshape([n, ch, sh, sw])?;
                    ops::adaptive_pool_backward(like, sh, sw, PoolMode::Average, &d)
                }
                None => d.reshape([n, ch, h, w]),
            }
        };
        let d_phi = unflatten(d_phi, &c.phi_full)?;
        let d_g = unflatten(d_g, &c.g_full)?;
        let d_theta = d_theta.reshape(c.phi_full.dims())?;
        let mut dx = dy.detached();
        ops::elementwise::add_assign(&mut dx, &self.theta.backward(&d_theta)?)?;
        ops::elementwise::add_assign(&mut dx, &self.phi.backward(&d_phi)?)?;
        ops::elementwise::add_assign(&mut dx, &self.g.backward(&d_g)?)?;
        Ok(dx)
    }

    /// Per-sample MACs: four projections plus the two attention products.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let c = self.channels() as u64;
        let inner = c / 2;
        let n = (h * w) as u64;
        let m = match self.compress_to {
            Some(s) => (s.min(h) * s.min(w)) as u64,
            None => n,
        };
        4 * c * inner * n + 2 * n * m * inner
    }
}

impl<T: Real> Module<T> for NlBlock<T> {
    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.theta.visit(&join(prefix, "theta"), f);
        self.phi.visit(&join(prefix, "phi"), f);
        self.g.visit(&join(prefix, "g"), f);
        self.w_z.visit(&join(prefix, "w_z"), f);
        self.bn_z.visit(&join(prefix, "bn_z"), f);
    }
}

struct SeCache<T> {
    x: Tensor<T>,
    hidden: Tensor<T>,
    scale: Tensor<T>,
}

/// Channel gating: `x * sigmoid(fc2(relu(fc1(gap(x)))))`.
pub struct SeBlock<T = f32> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub reduction: usize,
    cache: Option<SeCache<T>>,
}

impl<T: Real> SeBlock<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(format!(
                "SE reduction {reduction} must divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(SeBlock {
            fc1: Linear::new(channels, hidden, false, rng),
            fc2: Linear::new(hidden, channels, false, rng),
            reduction,
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.fc1.in_features()
    }

    /// Per-sample channel scales in `(0, 1)`.
    pub fn scales(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.gate(x, Mode::Eval)?.1)
    }

    fn gate(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tensor<T>)> {
        if x.c() != self.channels() {
            return Err(Error::dim(
                "se_forward",
                format!("input has {} channels, block expects {}", x.c(), self.channels()),
            ));
        }
        let pooled = ops::global_avg_pool(x);
        let hidden = ops::relu(&self.fc1.forward(&pooled, mode)?);
        let scale = ops::sigmoid(&self.fc2.forward(&hidden, mode)?);
        Ok((hidden, scale))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (hidden, scale) = self.gate(x, mode)?;
        let out = ops::scale_channels(x, &scale)?;
        self.cache = mode.is_train().then(|| SeCache {
            x: x.detached(),
            hidden,
            scale,
        });
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.cache.take().ok_or_else(|| missing_cache("squeeze_excitation"))?;
        let (mut dx, d_scale) = ops::scale_channels_backward(&c.x, &c.scale, dy)?;
        let d_logit = Tensor::from_vec(
            d_scale.dims(),
            d_scale
                .data()
                .iter()
                .zip(c.scale.data())
                .map(|(&g, &s)| g * s * (T::one() - s))
                .collect(),
        )?;
        let d_hidden = self.fc2.backward(&d_logit)?;
        let d_hidden = ops::relu_backward(&c.hidden, &d_hidden)?;
        let d_pooled = self.fc1.backward(&d_hidden)?;
        ops::elementwise::add_assign(&mut dx, &ops::global_avg_pool_backward(c.x.dims(), &d_pooled)?)?;
        Ok(dx)
    }

    pub fn macs(&self) -> u64 {
        self.fc1.macs() + self.fc2.macs()
    }
}

impl<T: Real> Module<T> for SeBlock<T> {
    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
}
