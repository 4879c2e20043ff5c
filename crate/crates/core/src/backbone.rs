//! Declarative ResNet builders with spatial-bias, non-local and
//! squeeze-excitation insertion.
//!
//! Two families are supported: the CIFAR bottleneck ResNet (3x3 stem with 16
//! channels, three stages of widths 16/32/64) and ImageNet ResNet-50. Both use
//! expansion-4 bottlenecks with the stride on the 3x3 convolution. Stages are
//! numbered from 1, starting after the stem.
//!
//! A spatial-bias insertion wraps the first or second convolution of every
//! block in the listed stages. The `k` bias channels widen the merged tensor,
//! and the following convolution consumes the wider input, so every block
//! still emits its nominal shape. Non-local blocks attach after every other
//! block (indices 1, 3, ...) and squeeze-excitation after every block, both
//! on the block output.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, LayerContext, Result};
use crate::layers::{join, missing_cache, BatchNorm, Conv2d, ConvBnRelu, Linear, Mode, Module, ParamKind, ParamVisitor};
use crate::nonlocal::{block_param_count, BlockConfig, NlBlock, SeBlock, SE_REDUCTION};
use crate::ops::{self, PoolMode};
use crate::spatial_bias::{sb_param_count, BiasedConv, MergeMode, SbConfig};
use crate::tensor::{Dims, Real, Tensor};

pub const EXPANSION: usize = 4;
/// Default key/value grid for `nl_compressed`.
pub const NL_COMPRESS_DEFAULT: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    CifarBottleneck,
    ImagenetR50,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertKind {
    Sb,
    Nl,
    NlCompressed,
    Se,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    AfterConv1,
    #[default]
    AfterConv2,
}

/// One insertion. Unset optional keys take family defaults.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InsertionSpec {
    pub kind: InsertKind,
    pub stages: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<Position>,
    /// SB grid side, or the key/value grid side for `nl_compressed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge_mode: Option<MergeMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_mode: Option<PoolMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_only: Option<bool>,
}

impl InsertionSpec {
    pub fn new(kind: InsertKind, stages: &[usize]) -> Self {
        InsertionSpec {
            kind,
            stages: stages.to_vec(),
            position: None,
            pool_size: None,
            bias_channels: None,
            kernel_width: None,
            merge_mode: None,
            pool_mode: None,
            pool_only: None,
        }
    }

    pub fn sb(stages: &[usize], cfg: SbConfig, position: Position) -> Self {
        InsertionSpec {
            position: Some(position),
            pool_size: Some(cfg.pool_size),
            bias_channels: Some(cfg.bias_channels),
            kernel_width: Some(cfg.kernel_width),
            merge_mode: Some(cfg.merge_mode),
            pool_mode: Some(cfg.pool_mode),
            pool_only: Some(cfg.pool_only),
            ..Self::new(InsertKind::Sb, stages)
        }
    }

    /// Resolved SB configuration with family defaults filled in.
    pub fn sb_config(&self, family: Family) -> SbConfig {
        let base = SbConfig::with_pool(default_pool(family));
        SbConfig {
            pool_size: self.pool_size.unwrap_or(base.pool_size),
            bias_channels: self.bias_channels.unwrap_or(base.bias_channels),
            kernel_width: self.kernel_width.unwrap_or(base.kernel_width),
            merge_mode: self.merge_mode.unwrap_or(base.merge_mode),
            pool_mode: self.pool_mode.unwrap_or(base.pool_mode),
            pool_only: self.pool_only.unwrap_or(base.pool_only),
        }
    }

    fn validate(&self, index: usize, stages: usize) -> Result<()> {
        let key = |k: &str| format!("insertions[{index}].{k}");
        if self.stages.is_empty() {
            return Err(Error::config(format!("{}: at least one stage is required", key("stages"))));
        }
        if let Some(&s) = self.stages.iter().find(|&&s| s == 0 || s > stages) {
            return Err(Error::config(format!(
                "{}: stage s{s} does not exist (valid: s1..s{stages})",
                key("stages")
            )));
        }
        if self.kind != InsertKind::Sb {
            let sb_only = [
                ("position", self.position.is_some()),
                ("bias_channels", self.bias_channels.is_some()),
                ("kernel_width", self.kernel_width.is_some()),
                ("merge_mode", self.merge_mode.is_some()),
                ("pool_mode", self.pool_mode.is_some()),
                ("pool_only", self.pool_only.is_some()),
                ("pool_size", self.pool_size.is_some() && self.kind != InsertKind::NlCompressed),
            ];
            if let Some((name, _)) = sb_only.iter().find(|(_, set)| *set) {
                return Err(Error::config(format!("{}: only applies to kind sb", key(name))));
            }
        }
        if self.pool_size == Some(0) {
            return Err(Error::config(format!("{}: must be at least 1", key("pool_size"))));
        }
        Ok(())
    }
}

fn default_pool(family: Family) -> usize {
    match family {
        Family::CifarBottleneck => 6,
        Family::ImagenetR50 => 10,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub family: Family,
    pub depth: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub insertions: Vec<InsertionSpec>,
}

/// Shape of one residual stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageLayout {
    pub blocks: usize,
    pub width: usize,
    pub stride: usize,
    /// Spatial side of the stage output at the nominal input resolution.
    pub size: usize,
}

impl NetSpec {
    pub fn cifar(depth: usize, num_classes: usize) -> Self {
        NetSpec {
            family: Family::CifarBottleneck,
            depth,
            num_classes,
            insertions: Vec::new(),
        }
    }

    pub fn resnet50(num_classes: usize) -> Self {
        NetSpec {
            family: Family::ImagenetR50,
            depth: 50,
            num_classes,
            insertions: Vec::new(),
        }
    }

    pub fn with(mut self, insertion: InsertionSpec) -> Self {
        self.insertions.push(insertion);
        self
    }

    /// Named configurations used by the CLI and the acceptance suite.
    pub fn preset(name: &str) -> Result<Self> {
        let sb_cifar = |d| NetSpec::cifar(d, 100).with(InsertionSpec::sb(&[1, 2], SbConfig::with_pool(6), Position::AfterConv2));
        Ok(match name {
            "resnet38" => NetSpec::cifar(38, 100),
            "resnet65" => NetSpec::cifar(65, 100),
            "resnet110" => NetSpec::cifar(110, 100),
            "sb-resnet38" => sb_cifar(38),
            "sb-resnet65" => sb_cifar(65),
            "sb-resnet110" => sb_cifar(110),
            "resnet50" => NetSpec::resnet50(1000),
            "sb-resnet50" => NetSpec::resnet50(1000).with(InsertionSpec::sb(
                &[1, 2, 3],
                SbConfig::with_pool(10),
                Position::AfterConv2,
            )),
            "se-resnet50" => NetSpec::resnet50(1000).with(InsertionSpec::new(InsertKind::Se, &[1, 2, 3, 4])),
            "nlnet50" => NetSpec::resnet50(1000).with(InsertionSpec::new(InsertKind::Nl, &[2, 3])),
            other => {
                return Err(Error::config(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: NetSpec = serde_json::from_str(text).map_err(|e| Error::config(format!("net spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("net spec serializes")
    }

    pub fn stem_width(&self) -> usize {
        match self.family {
            Family::CifarBottleneck => 16,
            Family::ImagenetR50 => 64,
        }
    }

    pub fn input_size(&self) -> usize {
        match self.family {
            Family::CifarBottleneck => 32,
            Family::ImagenetR50 => 224,
        }
    }

    pub fn stages(&self) -> Result<Vec<StageLayout>> {
        let stage = |blocks, width, stride, size| StageLayout {
            blocks,
            width,
            stride,
            size,
        };
        match self.family {
            Family::CifarBottleneck => {
                if self.depth < 11 || (self.depth - 2) % 9 != 0 {
                    return Err(Error::config(format!(
                        "depth: CIFAR bottleneck depth must be 9n+2 with n >= 1, got {}",
                        self.depth
                    )));
                }
                let n = (self.depth - 2) / 9;
                Ok(vec![stage(n, 16, 1, 32), stage(n, 32, 2, 16), stage(n, 64, 2, 8)])
            }
            Family::ImagenetR50 => {
                if self.depth != 50 {
                    return Err(Error::config(format!(
                        "depth: the ImageNet family only supports depth 50, got {}",
                        self.depth
                    )));
                }
                Ok(vec![
                    stage(3, 64, 1, 56),
                    stage(4, 128, 2, 28),
                    stage(6, 256, 2, 14),
                    stage(3, 512, 2, 7),
                ])
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let layout = self.stages()?;
        if self.num_classes == 0 {
            return Err(Error::config("num_classes: must be at least 1"));
        }
        let mut sb_stages = BTreeSet::new();
        for (i, ins) in self.insertions.iter().enumerate() {
            ins.validate(i, layout.len())?;
            if ins.kind != InsertKind::Sb {
                continue;
            }
            let cfg = ins.sb_config(self.family);
            cfg.validate().map_err(|e| Error::config(format!("insertions[{i}]: {e}")))?;
            for &s in &ins.stages {
                if !sb_stages.insert(s) {
                    return Err(Error::config(format!(
                        "insertions[{i}].stages: stage s{s} already has a spatial bias insertion"
                    )));
                }
                let st = layout[s - 1];
                if st.size < cfg.pool_size {
                    return Err(Error::config(format!(
                        "insertions[{i}]: stage s{s} feature map {0}x{0} is smaller than pool_size {1}",
                        st.size, cfg.pool_size
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-stage insertion plan.
    fn plan(&self, stages: usize) -> Vec<StagePlan> {
        let mut plan = vec![StagePlan::default(); stages];
        for ins in &self.insertions {
            for &s in &ins.stages {
                let p = &mut plan[s - 1];
                match ins.kind {
                    InsertKind::Sb => p.sb = Some((ins.sb_config(self.family), ins.position.unwrap_or_default())),
                    InsertKind::Nl => p.nl = Some(None),
                    InsertKind::NlCompressed => p.nl = Some(Some(ins.pool_size.unwrap_or(NL_COMPRESS_DEFAULT))),
                    InsertKind::Se => p.se = true,
                }
            }
        }
        plan
    }
}

pub const PRESETS: [&str; 10] = [
    "resnet38",
    "resnet65",
    "resnet110",
    "sb-resnet38",
    "sb-resnet65",
    "sb-resnet110",
    "resnet50",
    "sb-resnet50",
    "se-resnet50",
    "nlnet50",
];

#[derive(Clone, Copy, Debug, Default)]
struct StagePlan {
    sb: Option<(SbConfig, Position)>,
    /// `Some(compress_to)` when a non-local block is inserted.
    nl: Option<Option<usize>>,
    se: bool,
}

/// Non-local blocks follow blocks 1, 3, 5, ... of a stage.
pub fn nl_follows(block: usize) -> bool {
    block % 2 == 1
}

/// Parameters of the plain network, from the layout alone.
pub fn plain_param_count(spec: &NetSpec) -> Result<usize> {
    let layout = spec.stages()?;
    let stem = spec.stem_width();
    let stem_k = match spec.family {
        Family::CifarBottleneck => 3,
        Family::ImagenetR50 => 7,
    };
    let mut total = 3 * stem * stem_k * stem_k + 2 * stem;
    let mut inc = stem;
    for st in &layout {
        let (w, out) = (st.width, st.width * EXPANSION);
        for b in 0..st.blocks {
            total += inc * w + 2 * w + w * w * 9 + 2 * w + w * out + 2 * out;
            let stride = if b == 0 { st.stride } else { 1 };
            if stride != 1 || inc != out {
                total += inc * out + 2 * out;
            }
            inc = out;
        }
    }
    Ok(total + inc * spec.num_classes + spec.num_classes)
}

/// Parameters every insertion adds on top of the plain network.
///
/// A concat SB insertion adds the bias branch, `k` input channels on the next
/// convolution and BN affine terms for the `k` extra channels.
pub fn insertion_overhead(spec: &NetSpec) -> Result<usize> {
    let layout = spec.stages()?;
    let plan = spec.plan(layout.len());
    let mut total = 0;
    let mut inc = spec.stem_width();
    for (st, p) in layout.iter().zip(&plan) {
        let (w, out) = (st.width, st.width * EXPANSION);
        for b in 0..st.blocks {
            if let Some((cfg, pos)) = p.sb {
                let extra = cfg.extra_channels();
                let (c_in, next) = match pos {
                    Position::AfterConv1 => (inc, w * 9),
                    Position::AfterConv2 => (w, out),
                };
                total += sb_param_count(c_in, &cfg) + extra * next + 2 * extra;
            }
            if p.se {
                total += block_param_count(&BlockConfig::Se { reduction: SE_REDUCTION }, out);
            }
            if p.nl.is_some() && nl_follows(b) {
                total += block_param_count(&BlockConfig::Nl, out);
            }
            inc = out;
        }
    }
    Ok(total)
}

/// Closed-form total, independent of any built network.
pub fn analytic_param_count(spec: &NetSpec) -> Result<usize> {
    Ok(plain_param_count(spec)? + insertion_overhead(spec)?)
}

enum Unit<T> {
    Plain(ConvBnRelu<T>),
    Biased(BiasedConv<T>),
}

impl<T: Real> Unit<T> {
    fn build(conv: Conv2d<T>, sb: Option<SbConfig>, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(match sb {
            Some(cfg) => Unit::Biased(BiasedConv::new(conv, cfg, rng)?),
            None => Unit::Plain(ConvBnRelu::new(conv)),
        })
    }

    fn out_channels(&self) -> usize {
        match self {
            Unit::Plain(u) => u.conv.out_channels(),
            Unit::Biased(u) => u.out_channels(),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Unit::Plain(u) => u.forward(x, mode),
            Unit::Biased(u) => u.forward(x, mode),
        }
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Unit::Plain(u) => u.backward(dy),
            Unit::Biased(u) => u.backward(dy),
        }
    }

    fn macs(&self, h: usize, w: usize) -> Result<(u64, usize, usize)> {
        match self {
            Unit::Plain(u) => u.conv.macs(h, w),
            Unit::Biased(u) => u.macs(h, w),
        }
    }

    fn visit(&mut self, prefix: &str, sb_prefix: &str, f: &mut ParamVisitor<'_, T>) {
        match self {
            Unit::Plain(u) => u.visit(prefix, f),
            Unit::Biased(u) => u.visit_split(prefix, sb_prefix, f),
        }
    }
}

/// 1x1 reduce, 3x3 (strided), 1x1 expand, with a projection shortcut when
/// the shape changes.
pub struct Bottleneck<T = f32> {
    unit1: Unit<T>,
    unit2: Unit<T>,
    conv3: Conv2d<T>,
    bn3: BatchNorm<T>,
    shortcut: Option<(Conv2d<T>, BatchNorm<T>)>,
    output: Option<Tensor<T>>,
}

impl<T: Real> Bottleneck<T> {
    fn new(
        inc: usize,
        width: usize,
        stride: usize,
        sb: Option<(SbConfig, Position)>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let out = width * EXPANSION;
        let sb1 = sb.and_then(|(c, p)| (p == Position::AfterConv1).then_some(c));
        let sb2 = sb.and_then(|(c, p)| (p == Position::AfterConv2).then_some(c));
        let unit1 = Unit::build(Conv2d::new(inc, width, 1, 1, 0, rng), sb1, rng)?;
        let unit2 = Unit::build(Conv2d::new(unit1.out_channels(), width, 3, stride, 1, rng), sb2, rng)?;
        let conv3 = Conv2d::new(unit2.out_channels(), out, 1, 1, 0, rng);
        let shortcut = (stride != 1 || inc != out)
            .then(|| (Conv2d::new(inc, out, 1, stride, 0, rng), BatchNorm::new(out)));
        Ok(Bottleneck {
            unit1,
            unit2,
            conv3,
            bn3: BatchNorm::new(out),
            shortcut,
            output: None,
        })
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let a = self.unit1.forward(x, mode)?;
        let b = self.unit2.forward(&a, mode)?;
        let c = self.conv3.forward(&b, mode)?;
        let mut y = self.bn3.forward(&c, mode)?;
        match self.shortcut.as_mut() {
            Some((conv, bn)) => {
                let s = conv.forward(x, mode)?;
                ops::elementwise::add_assign(&mut y, &bn.forward(&s, mode)?)?;
            }
            None => ops::elementwise::add_assign(&mut y, x)?,
        }
        ops::elementwise::relu_in_place(&mut y);
        self.output = mode.is_train().then(|| y.detached());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.output.take().ok_or_else(|| missing_cache("bottleneck"))?;
        let d = ops::relu_backward(&y, dy)?;
        let dc = self.bn3.backward(&d)?;
        let db = self.conv3.backward(&dc)?;
        let da = self.unit2.backward(&db)?;
        let mut dx = self.unit1.backward(&da)?;
        match self.shortcut.as_mut() {
            Some((conv, bn)) => {
                let ds = bn.backward(&d)?;
                ops::elementwise::add_assign(&mut dx, &conv.backward(&ds)?)?;
            }
            None => ops::elementwise::add_assign(&mut dx, &d)?,
        }
        Ok(dx)
    }

    fn macs(&self, h: usize, w: usize) -> Result<(u64, usize, usize)> {
        let (m1, h1, w1) = self.unit1.macs(h, w)?;
        let (m2, h2, w2) = self.unit2.macs(h1, w1)?;
        let (m3, _, _) = self.conv3.macs(h2, w2)?;
        let ms = match &self.shortcut {
            Some((conv, _)) => conv.macs(h, w)?.0,
            None => 0,
        };
        Ok((m1 + m2 + m3 + ms, h2, w2))
    }

    fn visit(&mut self, prefix: &str, sb_prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.unit1.visit(&join(prefix, "conv1"), sb_prefix, f);
        self.unit2.visit(&join(prefix, "conv2"), sb_prefix, f);
        self.conv3.visit(&join(prefix, "conv3.conv"), f);
        self.bn3.visit(&join(prefix, "conv3.bn"), f);
        if let Some((conv, bn)) = self.shortcut.as_mut() {
            conv.visit(&join(prefix, "shortcut.conv"), f);
            bn.visit(&join(prefix, "shortcut.bn"), f);
        }
    }

    fn biased_mut(&mut self) -> impl Iterator<Item = &mut BiasedConv<T>> {
        [&mut self.unit1, &mut self.unit2].into_iter().filter_map(|u| match u {
            Unit::Biased(b) => Some(b),
            Unit::Plain(_) => None,
        })
    }
}

/// A residual block plus whatever attaches to its output.
struct Slot<T> {
    name: String,
    block: Bottleneck<T>,
    se: Option<SeBlock<T>>,
    nl: Option<NlBlock<T>>,
}

impl<T: Real> Slot<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut y = self.block.forward(x, mode)?;
        if let Some(se) = self.se.as_mut() {
            y = se.forward(&y, mode)?;
        }
        if let Some(nl) = self.nl.as_mut() {
            y = nl.forward(&y, mode)?;
        }
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut d = dy.detached();
        if let Some(nl) = self.nl.as_mut() {
            d = nl.backward(&d)?;
        }
        if let Some(se) = self.se.as_mut() {
            d = se.backward(&d)?;
        }
        self.block.backward(&d)
    }
}

struct HeadCache {
    pooled_from: Dims,
}

enum Stem<T> {
    Cifar(ConvBnRelu<T>),
    /// 7x7/2 conv-BN-ReLU followed by a 3x3/2 max pool; caches the pool input.
    Imagenet(ConvBnRelu<T>, Option<Tensor<T>>),
}

/// A built backbone with named parameters.
pub struct Network<T = f32> {
    pub spec: NetSpec,
    stem: Stem<T>,
    slots: Vec<Slot<T>>,
    fc: Linear<T>,
    head: Option<HeadCache>,
}

impl<T: Real> Network<T> {
    /// Builds and initializes the network; `seed` fixes every weight.
    pub fn build(spec: &NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = spec.stages()?;
        let plan = spec.plan(layout.len());
        let stem_w = spec.stem_width();
        let stem = match spec.family {
            Family::CifarBottleneck => Stem::Cifar(ConvBnRelu::new(Conv2d::new(3, stem_w, 3, 1, 1, &mut rng))),
            Family::ImagenetR50 => Stem::Imagenet(ConvBnRelu::new(Conv2d::new(3, stem_w, 7, 2, 3, &mut rng)), None),
        };
        let mut slots = Vec::new();
        let mut inc = stem_w;
        for (si, (st, p)) in layout.iter().zip(&plan).enumerate() {
            let out = st.width * EXPANSION;
            for b in 0..st.blocks {
                let name = format!("s{}.b{b}", si + 1);
                let stride = if b == 0 { st.stride } else { 1 };
                let block = Bottleneck::new(inc, st.width, stride, p.sb, &mut rng).in_layer(|| name.clone())?;
                let se = p
                    .se
                    .then(|| SeBlock::new(out, SE_REDUCTION, &mut rng))
                    .transpose()
                    .in_layer(|| name.clone())?;
                let nl = match p.nl {
                    Some(compress) if nl_follows(b) => Some(NlBlock::new(out, compress, &mut rng).in_layer(|| name.clone())?),
                    _ => None,
                };
                slots.push(Slot { name, block, se, nl });
                inc = out;
            }
        }
        let fc = Linear::new(inc, spec.num_classes, true, &mut rng);
        Ok(Network {
            spec: spec.clone(),
            stem,
            slots,
            fc,
            head: None,
        })
    }

    pub fn block_names(&self) -> Vec<String> {
        self.slots.iter().map(|s| s.name.clone()).collect()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.c() != 3 {
            return Err(Error::dim("forward", format!("expected 3 input channels, got {}", x.c())));
        }
        if self.spec.family == Family::CifarBottleneck && (x.h() != 32 || x.w() != 32) {
            return Err(Error::dim(
                "forward",
                format!("CIFAR networks take 32x32 inputs, got {}x{}", x.h(), x.w()),
            ));
        }
        Ok(())
    }

    /// Logits `(n, num_classes, 1, 1)`. `Mode::Train` uses batch statistics
    /// and caches activations for `backward`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.forward_traced(x, mode, &mut |_, _| {})
    }

    /// Like `forward`, calling `trace` with the name and output of the stem,
    /// every block and the head.
    pub fn forward_traced(
        &mut self,
        x: &Tensor<T>,
        mode: Mode,
        trace: &mut dyn FnMut(&str, &Tensor<T>),
    ) -> Result<Tensor<T>> {
        self.check_input(x).in_layer(|| "stem".into())?;
        let mut h = match &mut self.stem {
            Stem::Cifar(u) => u.forward(x, mode),
            Stem::Imagenet(u, cache) => {
                let y = u.forward(x, mode)?;
                let p = ops::max_pool2d(&y, 3, 2, 1)?;
                *cache = mode.is_train().then_some(y);
                Ok(p)
            }
        }
        .in_layer(|| "stem".into())?;
        finite(&h, "stem")?;
        trace("stem", &h);
        for slot in &mut self.slots {
            h = slot.forward(&h, mode).in_layer(|| slot.name.clone())?;
            finite(&h, &slot.name)?;
            trace(&slot.name, &h);
        }
        let pooled_from = h.dims();
        let pooled = ops::global_avg_pool(&h);
        let logits = self.fc.forward(&pooled, mode).in_layer(|| "fc".into())?;
        finite(&logits, "fc")?;
        trace("fc", &logits);
        self.head = mode.is_train().then_some(HeadCache { pooled_from });
        Ok(logits)
    }

    /// Backpropagates `d_logits`, accumulating parameter gradients; returns
    /// the input gradient.
    pub fn backward(&mut self, d_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let head = self.head.take().ok_or_else(|| missing_cache("network"))?;
        let d_pooled = self.fc.backward(d_logits).in_layer(|| "fc".into())?;
        let mut d = ops::global_avg_pool_backward(head.pooled_from, &d_pooled)?;
        for slot in self.slots.iter_mut().rev() {
            d = slot.backward(&d).in_layer(|| slot.name.clone())?;
        }
        match &mut self.stem {
            Stem::Cifar(u) => u.backward(&d),
            Stem::Imagenet(u, cache) => {
                let y = cache.take().ok_or_else(|| missing_cache("stem"))?;
                let d = ops::max_pool2d_backward(&y, 3, 2, 1, &d)?;
                u.backward(&d)
            }
        }
        .in_layer(|| "stem".into())
    }

    /// Output dims of the stem and every block for an `input` batch.
    pub fn block_shapes(&mut self, input: Dims) -> Result<Vec<(String, Dims)>> {
        let mut shapes = Vec::new();
        self.forward_traced(&Tensor::zeros(input), Mode::Eval, &mut |name, t| {
            shapes.push((name.to_string(), t.dims()))
        })?;
        Ok(shapes)
    }

    /// Multiply-accumulates per sample: convolutions, linear layers and
    /// attention products.
    pub fn count_macs(&self, h: usize, w: usize) -> Result<u64> {
        let (mut total, mut h, mut w) = match &self.stem {
            Stem::Cifar(u) => u.conv.macs(h, w)?,
            Stem::Imagenet(u, _) => {
                let (m, oh, ow) = u.conv.macs(h, w)?;
                (m, ops::conv_out_size(oh, 3, 2, 1)?, ops::conv_out_size(ow, 3, 2, 1)?)
            }
        };
        for slot in &self.slots {
            let (m, oh, ow) = slot.block.macs(h, w).in_layer(|| slot.name.clone())?;
            total += m;
            (h, w) = (oh, ow);
            if let Some(se) = &slot.se {
                total += se.macs();
            }
            if let Some(nl) = &slot.nl {
                total += nl.macs(h, w);
            }
        }
        Ok(total + self.fc.macs())
    }

    /// Zeroes every SB mixing weight and bias, and the BN affine terms over
    /// the bias channels, so each branch contributes exactly zero.
    pub fn zero_spatial_bias(&mut self) {
        for slot in &mut self.slots {
            for b in slot.block.biased_mut() {
                b.sb.zero_mix();
                let conv_c = b.conv.out_channels();
                let bn = &mut b.bn.state;
                for t in [&mut bn.gamma, &mut bn.beta] {
                    t.data_mut()[conv_c..].iter_mut().for_each(|v| *v = T::zero());
                }
            }
        }
    }

    /// Copies every same-named tensor of `other` into the leading corner of
    /// the matching tensor here. Returns the number of tensors copied.
    pub fn copy_matching_from(&mut self, other: &mut Network<T>) -> Result<usize> {
        let mut source = BTreeMap::new();
        other.visit("", &mut |name, _, t| {
            source.insert(name.to_string(), t.detached());
        });
        let mut copied = 0;
        let mut failure = None;
        self.visit("", &mut |name, _, t| {
            let Some(src) = source.get(name) else { return };
            let (sd, td) = (src.dims(), t.dims());
            if sd.iter().zip(&td).any(|(s, d)| s > d) {
                failure.get_or_insert_with(|| {
                    Error::dim("copy_matching_from", format!("{name}: {sd:?} does not fit in {td:?}"))
                });
                return;
            }
            let [_, c, h, w] = td;
            let [sn, sc, sh, sw] = sd;
            let dst = t.data_mut();
            for (i, &v) in src.data().iter().enumerate() {
                let (ix, rest) = (i / (sc * sh * sw), i % (sc * sh * sw));
                let (ic, rest) = (rest / (sh * sw), rest % (sh * sw));
                let (ih, iw) = (rest / sw, rest % sw);
                debug_assert!(ix < sn);
                dst[((ix * c + ic) * h + ih) * w + iw] = v;
            }
            copied += 1;
        });
        failure.map_or(Ok(copied), Err)
    }
}

fn finite<T: Real>(t: &Tensor<T>, layer: &str) -> Result<()> {
    t.check_finite("output").in_layer(|| layer.to_string())
}

impl<T: Real> Module<T> for Network<T> {
    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        match &mut self.stem {
            Stem::Cifar(u) | Stem::Imagenet(u, _) => u.visit(&join(prefix, "stem"), f),
        }
        for slot in &mut self.slots {
            let name = join(prefix, &slot.name);
            let sb_prefix = join(prefix, &format!("sb.{}", slot.name));
            slot.block.visit(&name, &sb_prefix, f);
            if let Some(se) = slot.se.as_mut() {
                se.visit(&join(prefix, &format!("se.{}", slot.name)), f);
            }
            if let Some(nl) = slot.nl.as_mut() {
                nl.visit(&join(prefix, &format!("nl.{}", slot.name)), f);
            }
        }
        self.fc.visit(&join(prefix, "fc"), f);
    }
}

/// Learnable parameter count of a built network.
pub fn count_params<T: Real>(net: &mut Network<T>) -> usize {
    net.param_count()
}

/// Learnable parameters whose names start with `prefix`.
pub fn count_params_under<T: Real>(net: &mut Network<T>, prefix: &str) -> usize {
    let mut total = 0;
    net.visit("", &mut |name, kind, t| {
        if kind == ParamKind::Learnable && name.starts_with(prefix) {
            total += t.len();
        }
    });
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_depth_must_be_9n_plus_2() {
        assert!(NetSpec::cifar(38, 10).validate().is_ok());
        let err = NetSpec::cifar(40, 10).validate().unwrap_err();
        assert!(err.to_string().contains("depth"));
    }

    #[test]
    fn analytic_plain_counts() {
        assert_eq!(plain_param_count(&NetSpec::cifar(38, 100)).unwrap(), 428_980);
        assert_eq!(plain_param_count(&NetSpec::cifar(65, 100)).unwrap(), 707_188);
        assert_eq!(plain_param_count(&NetSpec::cifar(110, 100)).unwrap(), 1_170_868);
        assert_eq!(plain_param_count(&NetSpec::resnet50(1000)).unwrap(), 25_557_032);
    }

    #[test]
    fn analytic_overheads() {
        let count = |p: &str| analytic_param_count(&NetSpec::preset(p).unwrap()).unwrap();
        assert_eq!(count("sb-resnet65"), 767_920);
        assert_eq!(count("sb-resnet50"), 25_986_490);
        assert_eq!(count("se-resnet50"), 28_071_976);
        assert_eq!(count("nlnet50"), 32_905_256);
    }

    #[test]
    fn built_count_matches_closed_form() {
        for spec in [
            NetSpec::preset("sb-resnet38").unwrap(),
            NetSpec::cifar(38, 10)
                .with(InsertionSpec::sb(&[1, 3], SbConfig::with_pool(4), Position::AfterConv1))
                .with(InsertionSpec::new(InsertKind::Se, &[2]))
                .with(InsertionSpec::new(InsertKind::Nl, &[3])),
        ] {
            let mut net = Network::<f32>::build(&spec, 0).unwrap();
            assert_eq!(count_params(&mut net), analytic_param_count(&spec).unwrap(), "{spec:?}");
        }
    }

    #[test]
    fn names_are_unique() {
        let spec = NetSpec::cifar(11, 10)
            .with(InsertionSpec::sb(&[1], SbConfig::default(), Position::AfterConv2))
            .with(InsertionSpec::new(InsertKind::Se, &[1, 2, 3]));
        let mut net = Network::<f32>::build(&spec, 0).unwrap();
        let mut names = Vec::new();
        net.visit("", &mut |n, _, _| names.push(n.to_string()));
        let unique: BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert!(names.contains(&"sb.s1.b0.reduce".to_string()));
        assert!(names.contains(&"se.s2.b0.fc1.weight".to_string()));
        assert!(names.contains(&"s1.b0.conv2.bn.gamma".to_string()));
    }

    #[test]
    fn sb_on_small_map_names_stage() {
        let spec = NetSpec::resnet50(1000).with(InsertionSpec::sb(&[4], SbConfig::with_pool(10), Position::AfterConv2));
        let err = spec.validate().unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("s4"), "{err}");
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let spec = NetSpec::preset("sb-resnet50").unwrap();
        assert_eq!(NetSpec::from_json(&spec.to_json()).unwrap(), spec);
        let bad = r#"{"family":"cifar_bottleneck","depth":38,"num_classes":10,"colour":1}"#;
        assert!(NetSpec::from_json(bad).unwrap_err().is_config());
        let bad = r#"{"family":"cifar_bottleneck","depth":38,"num_classes":10,
                      "insertions":[{"kind":"se","stages":[1],"position":"after_conv1"}]}"#;
        assert!(NetSpec::from_json(bad).unwrap_err().to_string().contains("position"));
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let mut net = Network::<f32>::build(&NetSpec::preset("sb-resnet38").unwrap(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let one = Tensor::<f32>::randn([1, 3, 32, 32], 1.0, &mut rng);
        let mut both = one.data().to_vec();
        both.extend_from_slice(one.data());
        let x = Tensor::from_vec([2, 3, 32, 32], both).unwrap();
        let y = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.dims(), [2, 100, 1, 1]);
        assert_eq!(y.sample(0), y.sample(1));
    }

    #[test]
    fn wrong_input_names_layer() {
        let mut net = Network::<f32>::build(&NetSpec::cifar(11, 10), 0).unwrap();
        let err = net.forward(&Tensor::zeros([1, 3, 16, 16]), Mode::Eval).unwrap_err();
        assert!(err.to_string().contains("stem"), "{err}");
    }
}
