//! Spatial bias: a few globally informed channels concatenated onto a
//! convolution's output.
//!
//! The bias branch squeezes the input to `C' = k + N - 1` channels with a 1x1
//! convolution, pools it to a fixed `s x s` grid, and treats the `s^2` grid
//! cells as the channel axis of a valid 1-D convolution running along the `C'`
//! axis. With kernel width `N` the 1-D convolution yields exactly `k` outputs
//! per cell, which are folded back into `k` maps of size `s x s` and
//! bilinearly upsampled to the convolution's output size. The merged tensor
//! then goes through BN and ReLU:
//!
//! ```text
//! out = ReLU(BN([conv(x), sb(x)]))
//! ```
//!
//! Because the mixing convolution only ever sees an `s x s` grid, its cost and
//! parameter count are independent of the input resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{he_normal_fan_out, join, missing_cache, BatchNorm, Conv2d, Mode, Module, ParamKind, ParamVisitor};
use crate::ops::{self, ConvParams, PoolMode};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    #[default]
    Concat,
    Add,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SbConfig {
    /// Side of the pooled grid (`H' = W'`).
    pub pool_size: usize,
    /// Number of bias maps `k`.
    pub bias_channels: usize,
    /// Width `N` of the 1-D mixing kernel.
    pub kernel_width: usize,
    pub merge_mode: MergeMode,
    pub pool_mode: PoolMode,
    /// Skip the mixing convolution and use the first `k` pooled channels.
    pub pool_only: bool,
}

impl Default for SbConfig {
    fn default() -> Self {
        SbConfig {
            pool_size: 6,
            bias_channels: 3,
            kernel_width: 3,
            merge_mode: MergeMode::Concat,
            pool_mode: PoolMode::Average,
            pool_only: false,
        }
    }
}

impl SbConfig {
    pub fn with_pool(pool_size: usize) -> Self {
        SbConfig {
            pool_size,
            ..Self::default()
        }
    }

    /// Channels after the 1x1 reduction, `C' = k + N - 1`.
    pub fn reduced_channels(&self) -> usize {
        self.bias_channels + self.kernel_width - 1
    }

    /// Grid cells `H'W'`, the channel count of the mixing convolution.
    pub fn cells(&self) -> usize {
        self.pool_size * self.pool_size
    }

    /// Channels the merge adds on top of the convolution output.
    pub fn extra_channels(&self) -> usize {
        match self.merge_mode {
            MergeMode::Concat => self.bias_channels,
            MergeMode::Add => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 {
            return Err(Error::config("pool_size must be at least 1"));
        }
        if self.bias_channels == 0 {
            return Err(Error::config("bias_channels must be at least 1"));
        }
        if self.kernel_width < 2 {
            return Err(Error::config("kernel_width must be at least 2"));
        }
        Ok(())
    }
}

/// Closed-form parameter count of the bias branch:
/// `C_in * C'` for the bias-free reduction plus `(H'W')^2 * N + H'W'` for the
/// mixing convolution and its bias.
pub fn sb_param_count(c_in: usize, cfg: &SbConfig) -> usize {
    let reduce = c_in * cfg.reduced_channels();
    if cfg.pool_only {
        return reduce;
    }
    let q = cfg.cells();
    reduce + q * q * cfg.kernel_width + q
}

#[derive(Clone, Debug)]
struct SbCache<T> {
    x: Tensor<T>,
    reduced: Tensor<T>,
    seq: Option<Tensor<T>>,
}

/// The bias generator branch.
#[derive(Clone, Debug)]
pub struct SpatialBias<T = f32> {
    pub cfg: SbConfig,
    pub reduce: ConvParams<T>,
    /// `(H'W', H'W', 1, N)` weight with a `(1, H'W', 1, 1)` bias.
    pub mix: ConvParams<T>,
    cache: Option<SbCache<T>>,
}

impl<T: Real> SpatialBias<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, cfg: SbConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let cp = cfg.reduced_channels();
        let q = cfg.cells();
        Ok(SpatialBias {
            cfg,
            reduce: ConvParams::new(he_normal_fan_out([cp, c_in, 1, 1], rng), None, 1, 0),
            mix: ConvParams::new(
                he_normal_fan_out([q, q, 1, cfg.kernel_width], rng),
                Some(Tensor::zeros([1, q, 1, 1]).with_grad()),
                1,
                0,
            ),
            cache: None,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.reduce.in_channels()
    }

    /// Zeroes the mixing weights and bias so the branch emits exactly zero
    /// while staying trainable.
    pub fn zero_mix(&mut self) {
        self.mix.weight.data_mut().iter_mut().for_each(|v| *v = T::zero());
        if let Some(b) = self.mix.bias.as_mut() {
            b.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Produces `(n, k, out_h, out_w)` bias maps from `x`.
    pub fn generate(&mut self, x: &Tensor<T>, out_h: usize, out_w: usize, mode: Mode) -> Result<Tensor<T>> {
        let cfg = self.cfg;
        let s = cfg.pool_size;
        if x.h() < s || x.w() < s {
            return Err(Error::config(format!(
                "spatial bias input {}x{} is smaller than pool size {s}",
                x.h(),
                x.w()
            )));
        }
        let n = x.n();
        let (cp, q, k) = (cfg.reduced_channels(), cfg.cells(), cfg.bias_channels);
        let reduced = ops::conv2d(x, &self.reduce)?;
        let pooled = ops::adaptive_pool(&reduced, s, s, cfg.pool_mode)?;
        let (maps, seq) = if cfg.pool_only {
            let mut parts = ops::split_channels(&pooled, &[k, cp - k])?;
            parts.truncate(1);
            (parts.pop().expect("split yields a first part"), None)
        } else {
            // each grid cell becomes a channel, the C' axis becomes the length
            let seq = ops::transpose_samples(&pooled, cp, q, [n, q, 1, cp])?;
            let mixed = ops::conv1d(&seq, &self.mix)?;
            let maps = ops::transpose_samples(&mixed, q, k, [n, k, s, s])?;
            (maps, Some(seq))
        };
        let out = ops::bilinear_upsample(&maps, out_h, out_w)?;
        self.cache = mode.is_train().then(|| SbCache {
            x: x.detached(),
            reduced,
            seq,
        });
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the gradient for `x`.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("spatial_bias"))?;
        let cfg = self.cfg;
        let s = cfg.pool_size;
        let n = cache.x.n();
        let (cp, q, k) = (cfg.reduced_channels(), cfg.cells(), cfg.bias_channels);
        let d_maps = ops::bilinear_upsample_backward([n, k, s, s], dy)?;
        let d_pooled = match &cache.seq {
            None => {
                let rest = Tensor::zeros([n, cp - k, s, s]);
                ops::concat_channels(&[&d_maps, &rest])?
            }
            Some(seq) => {
                let d_mixed = ops::transpose_samples(&d_maps, k, q, [n, q, 1, k])?;
                let d_seq = ops::conv1d_backward(seq, &mut self.mix, &d_mixed)?;
                ops::transpose_samples(&d_seq, q, cp, [n, cp, s, s])?
            }
        };
        let d_reduced = ops::adaptive_pool_backward(&cache.reduced, s, s, cfg.pool_mode, &d_pooled)?;
        ops::conv2d_backward(&cache.x, &mut self.reduce, &d_reduced)
    }

    pub fn param_count(&self) -> usize {
        let mix = if self.cfg.pool_only {
            0
        } else {
            self.mix.weight.len() + self.mix.bias.as_ref().map_or(0, Tensor::len)
        };
        self.reduce.weight.len() + mix
    }

    /// Multiply-accumulates per sample for an `h x w` input. Pooling and
    /// interpolation are not counted.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let reduce = (self.in_channels() * self.cfg.reduced_channels() * h * w) as u64;
        if self.cfg.pool_only {
            return reduce;
        }
        let q = self.cfg.cells() as u64;
        reduce + q * q * (self.cfg.kernel_width * self.cfg.bias_channels) as u64
    }
}

impl<T: Real> Module<T> for SpatialBias<T> {
    /// `prefix` is the block id; tensors are named `<prefix>.reduce`,
    /// `<prefix>.mix` and `<prefix>.mix_bias`.
    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "reduce"), ParamKind::Learnable, &mut self.reduce.weight);
        if !self.cfg.pool_only {
            f(&join(prefix, "mix"), ParamKind::Learnable, &mut self.mix.weight);
            if let Some(b) = self.mix.bias.as_mut() {
                f(&join(prefix, "mix_bias"), ParamKind::Learnable, b);
            }
        }
    }
}

fn check_merge<T: Real>(conv_out: &Tensor<T>, sb: &Tensor<T>, cfg: &SbConfig) -> Result<()> {
    let [n, c, h, w] = conv_out.dims();
    let [sn, k, sh, sw] = sb.dims();
    if (n, h, w) != (sn, sh, sw) {
        return Err(Error::dim(
            "sb_merge",
            format!("bias {:?} does not match conv output {:?}", sb.dims(), conv_out.dims()),
        ));
    }
    if cfg.merge_mode == MergeMode::Add && k != c && k != 1 {
        return Err(Error::dim(
            "sb_merge",
            format!("add merge needs 1 or {c} bias channels, got {k}"),
        ));
    }
    Ok(())
}

/// Pre-normalization merge: channel concat, or (broadcast) addition.
pub fn merge_maps<T: Real>(conv_out: &Tensor<T>, sb: &Tensor<T>, cfg: &SbConfig) -> Result<Tensor<T>> {
    check_merge(conv_out, sb, cfg)?;
    match cfg.merge_mode {
        MergeMode::Concat => ops::concat_channels(&[conv_out, sb]),
        MergeMode::Add if sb.c() == conv_out.c() => ops::add(conv_out, sb),
        MergeMode::Add => {
            let plane = conv_out.h() * conv_out.w();
            let mut out = conv_out.detached();
            let c = conv_out.c();
            for (idx, p) in out.data_mut().chunks_mut(plane).enumerate() {
                let src = &sb.sample(idx / c)[..plane];
                for (o, &b) in p.iter_mut().zip(src) {
                    *o += b;
                }
            }
            Ok(out)
        }
    }
}

/// Splits the merged gradient into `(d_conv_out, d_sb)`.
pub fn merge_maps_backward<T: Real>(
    conv_dims: [usize; 4],
    sb_dims: [usize; 4],
    cfg: &SbConfig,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    match cfg.merge_mode {
        MergeMode::Concat => {
            let mut parts = ops::split_channels(dy, &[conv_dims[1], sb_dims[1]])?;
            let d_sb = parts.pop().expect("two parts");
            let d_conv = parts.pop().expect("two parts");
            Ok((d_conv, d_sb))
        }
        MergeMode::Add if sb_dims == conv_dims => Ok((dy.detached(), dy.detached())),
        MergeMode::Add => {
            let [n, c, h, w] = conv_dims;
            let plane = h * w;
            let mut d_sb = Tensor::zeros([n, 1, h, w]);
            for (idx, p) in dy.data().chunks(plane).enumerate() {
                let s = idx / c;
                for (d, &g) in d_sb.data_mut()[s * plane..(s + 1) * plane].iter_mut().zip(p) {
                    *d += g;
                }
            }
            Ok((dy.detached(), d_sb))
        }
    }
}

/// `ReLU(BN(merge(conv_out, sb)))`, forward only.
pub fn sb_merge<T: Real>(
    conv_out: &Tensor<T>,
    sb: &Tensor<T>,
    bn: &mut ops::BnState<T>,
    cfg: &SbConfig,
) -> Result<Tensor<T>> {
    let merged = merge_maps(conv_out, sb, cfg)?;
    let (y, _) = ops::batch_norm(&merged, bn)?;
    Ok(ops::relu(&y))
}

/// A convolution with a parallel spatial-bias branch reading the same input,
/// followed by BN and ReLU over the merged channels.
#[derive(Clone, Debug)]
pub struct BiasedConv<T = f32> {
    pub conv: Conv2d<T>,
    pub sb: SpatialBias<T>,
    pub bn: BatchNorm<T>,
    shapes: Option<([usize; 4], [usize; 4])>,
    output: Option<Tensor<T>>,
}

impl<T: Real> BiasedConv<T> {
    pub fn new<R: Rng + ?Sized>(conv: Conv2d<T>, cfg: SbConfig, rng: &mut R) -> Result<Self> {
        if cfg.merge_mode == MergeMode::Add && cfg.bias_channels != 1 && cfg.bias_channels != conv.out_channels() {
            return Err(Error::config(format!(
                "add merge needs bias_channels of 1 or {}, got {}",
                conv.out_channels(),
                cfg.bias_channels
            )));
        }
        let sb = SpatialBias::new(conv.in_channels(), cfg, rng)?;
        let bn = BatchNorm::new(conv.out_channels() + cfg.extra_channels());
        Ok(BiasedConv {
            conv,
            sb,
            bn,
            shapes: None,
            output: None,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.bn.channels()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let c = self.conv.forward(x, mode)?;
        let b = self.sb.generate(x, c.h(), c.w(), mode)?;
        let merged = merge_maps(&c, &b, &self.sb.cfg)?;
        let mut y = self.bn.forward(&merged, mode)?;
        ops::elementwise::relu_in_place(&mut y);
        if mode.is_train() {
            self.shapes = Some((c.dims(), b.dims()));
            self.output = Some(y.detached());
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.output.take().ok_or_else(|| missing_cache("biased_conv"))?;
        let (conv_dims, sb_dims) = self.shapes.take().ok_or_else(|| missing_cache("biased_conv"))?;
        let d = ops::relu_backward(&y, dy)?;
        let d = self.bn.backward(&d)?;
        let (d_conv, d_sb) = merge_maps_backward(conv_dims, sb_dims, &self.sb.cfg, &d)?;
        let mut dx = self.conv.backward(&d_conv)?;
        let dx_sb = self.sb.backward(&d_sb)?;
        ops::elementwise::add_assign(&mut dx, &dx_sb)?;
        Ok(dx)
    }

    pub fn macs(&self, h: usize, w: usize) -> Result<(u64, usize, usize)> {
        let (conv, oh, ow) = self.conv.macs(h, w)?;
        Ok((conv + self.sb.macs(h, w), oh, ow))
    }

    /// Visits conv/BN under `prefix` and the bias branch under `sb_prefix`.
    pub fn visit_split(&mut self, prefix: &str, sb_prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
        self.sb.visit(sb_prefix, f);
    }
}

impl<T: Real> Module<T> for BiasedConv<T> {
    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        let sb_prefix = join("sb", prefix);
        self.visit_split(prefix, &sb_prefix, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reduced_channels_make_k_outputs() {
        let cfg = SbConfig::default();
        assert_eq!(cfg.reduced_channels(), 5);
        assert_eq!(cfg.reduced_channels() - cfg.kernel_width + 1, cfg.bias_channels);
    }

    #[test]
    fn param_count_formula() {
        assert_eq!(sb_param_count(32, &SbConfig::with_pool(6)), 32 * 5 + 36 * 36 * 3 + 36);
        assert_eq!(sb_param_count(32, &SbConfig::with_pool(6)), 4084);
        assert_eq!(sb_param_count(256, &SbConfig::with_pool(10)), 256 * 5 + 100 * 100 * 3 + 100);
        assert_eq!(sb_param_count(256, &SbConfig::with_pool(10)), 31_380);
    }

    #[test]
    fn layer_count_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for cfg in [
            SbConfig::with_pool(6),
            SbConfig { pool_only: true, ..SbConfig::default() },
            SbConfig { bias_channels: 4, kernel_width: 5, ..SbConfig::with_pool(4) },
        ] {
            let mut sb = SpatialBias::<f32>::new(24, cfg, &mut rng).unwrap();
            assert_eq!(Module::param_count(&mut sb), sb_param_count(24, &cfg));
            assert_eq!(sb.param_count(), sb_param_count(24, &cfg));
        }
    }

    #[test]
    fn output_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sb = SpatialBias::<f32>::new(64, SbConfig::with_pool(6), &mut rng).unwrap();
        let x = Tensor::randn([2, 64, 32, 32], 1.0, &mut rng);
        let y = sb.generate(&x, 32, 32, Mode::Eval).unwrap();
        assert_eq!(y.dims(), [2, 3, 32, 32]);
        let y = sb.generate(&x, 16, 16, Mode::Eval).unwrap();
        assert_eq!(y.dims(), [2, 3, 16, 16]);
    }

    #[test]
    fn zero_mix_gives_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sb = SpatialBias::<f64>::new(8, SbConfig::with_pool(4), &mut rng).unwrap();
        sb.zero_mix();
        let x = Tensor::full([1, 8, 8, 8], 2.5);
        let y = sb.generate(&x, 8, 8, Mode::Eval).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn small_input_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sb = SpatialBias::<f32>::new(4, SbConfig::with_pool(6), &mut rng).unwrap();
        let x = Tensor::zeros([1, 4, 5, 8]);
        assert!(matches!(sb.generate(&x, 5, 8, Mode::Eval), Err(Error::Config(_))));
    }

    #[test]
    fn merge_channel_arithmetic() {
        let c = Tensor::<f32>::zeros([1, 61, 8, 8]);
        let b = Tensor::<f32>::zeros([1, 3, 8, 8]);
        let mut bn = ops::BnState::new(64);
        let y = sb_merge(&c, &b, &mut bn, &SbConfig::default()).unwrap();
        assert_eq!(y.c(), 64);
    }

    #[test]
    fn zero_bias_eval_merge_is_relu_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = Tensor::<f64>::randn([2, 5, 4, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::zeros([2, 3, 4, 4]);
        let mut bn = ops::BnState::new(8);
        bn.training = false;
        bn.eps = 0.0;
        let y = sb_merge(&c, &b, &mut bn, &SbConfig::default()).unwrap();
        let parts = ops::split_channels(&y, &[5, 3]).unwrap();
        assert_eq!(parts[0], ops::relu(&c));
        assert!(parts[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn merge_spatial_mismatch() {
        let c = Tensor::<f32>::zeros([1, 4, 8, 8]);
        let b = Tensor::<f32>::zeros([1, 3, 4, 4]);
        assert!(matches!(merge_maps(&c, &b, &SbConfig::default()), Err(Error::Dimension { .. })));
    }

    #[test]
    fn add_merge_broadcasts_single_map() {
        let cfg = SbConfig { merge_mode: MergeMode::Add, bias_channels: 1, ..SbConfig::default() };
        let c = Tensor::<f64>::zeros([1, 3, 2, 2]);
        let b = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = merge_maps(&c, &b, &cfg).unwrap();
        assert_eq!(y.dims(), [1, 3, 2, 2]);
        assert_eq!(y.at(0, 2, 1, 1), 4.0);
        let bad = Tensor::<f64>::zeros([1, 2, 2, 2]);
        assert!(merge_maps(&c, &bad, &cfg).is_err());
    }
}
