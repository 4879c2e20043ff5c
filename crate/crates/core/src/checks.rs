//! The standard gradient-check suite: every differentiable op and block in
//! double precision against central differences.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gradcheck::{grad_check, weighted_sum, GradReport};
use crate::layers::{Conv2d, Mode, Module, ParamKind};
use crate::nonlocal::{NlBlock, SeBlock};
use crate::ops::{self, BnState, ConvParams, PoolMode};
use crate::spatial_bias::{BiasedConv, MergeMode, SbConfig};
use crate::tensor::{Dims, Tensor};

pub const TOL: f64 = 1e-4;
/// The linear layer's analytic gradient is exact up to rounding.
pub const LINEAR_TOL: f64 = 1e-6;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct OpCheck {
    pub op: String,
    pub report: GradReport,
}

/// Fixed random weights for the scalar probe `sum(y * r)`.
fn probe(y: &Tensor<f64>, seed: u64) -> Result<(f64, Tensor<f64>)> {
    let r = Tensor::randn(y.dims(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9));
    weighted_sum(y, &r)
}

fn randn(dims: Dims, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(dims, 1.0, rng)
}

fn run<F>(op: &str, mut leaves: Vec<Tensor<f64>>, tol: f64, seed: u64, f: F) -> Result<OpCheck>
where
    F: FnMut(&mut [Tensor<f64>]) -> Result<f64>,
{
    let report = grad_check(&mut leaves, f, tol, seed)?;
    Ok(OpCheck {
        op: op.to_string(),
        report,
    })
}

/// Checks the input and every learnable tensor of a stateful block.
fn module_check<M, F, B>(op: &str, m: &mut M, x: Tensor<f64>, seed: u64, mut fwd: F, mut bwd: B) -> Result<OpCheck>
where
    M: Module<f64>,
    F: FnMut(&mut M, &Tensor<f64>) -> Result<Tensor<f64>>,
    B: FnMut(&mut M, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    let mut leaves = vec![x];
    m.visit("", &mut |_, kind, t| {
        if kind == ParamKind::Learnable {
            leaves.push(t.detached());
        }
    });
    run(op, leaves, TOL, seed, |l| {
        let mut i = 1;
        m.visit("", &mut |_, kind, t| {
            if kind == ParamKind::Learnable {
                t.data_mut().copy_from_slice(l[i].data());
                t.zero_grad();
                i += 1;
            }
        });
        let y = fwd(m, &l[0])?;
        let (loss, dy) = probe(&y, seed)?;
        let dx = bwd(m, &dy)?;
        l[0].accumulate_grad(dx.data());
        let mut i = 1;
        m.visit("", &mut |_, kind, t| {
            if kind == ParamKind::Learnable {
                if let Some(g) = t.grad() {
                    l[i].accumulate_grad(g);
                }
                i += 1;
            }
        });
        Ok(loss)
    })
}

fn conv_check(op: &str, x: Dims, w: Dims, bias: bool, stride: usize, pad: usize, seed: u64) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut leaves = vec![randn(x, &mut rng), randn(w, &mut rng)];
    if bias {
        leaves.push(randn([1, w[0], 1, 1], &mut rng));
    }
    let conv1d = x[2] == 1 && w[2] == 1;
    run(op, leaves, TOL, seed, |l| {
        let mut p = ConvParams::new(l[1].detached(), l.get(2).map(Tensor::detached), stride, pad);
        let y = if conv1d { ops::conv1d(&l[0], &p)? } else { ops::conv2d(&l[0], &p)? };
        let (loss, dy) = probe(&y, seed)?;
        let dx = if conv1d {
            ops::conv1d_backward(&l[0], &mut p, &dy)?
        } else {
            ops::conv2d_backward(&l[0], &mut p, &dy)?
        };
        l[0].accumulate_grad(dx.data());
        l[1].accumulate_grad(p.weight.grad().expect("weight gradient"));
        if let (Some(b), Some(lb)) = (p.bias.as_ref(), l.get_mut(2)) {
            lb.accumulate_grad(b.grad().expect("bias gradient"));
        }
        Ok(loss)
    })
}

/// Distinct values at least `0.05` apart, so that no max-window argmax can
/// flip under a perturbation of the step size.
fn separated(dims: Dims, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = dims.iter().product::<usize>();
    let mut v: Vec<f64> = (0..len).map(|i| (i as f64 - len as f64 / 2.0) * 0.05).collect();
    v.shuffle(rng);
    Tensor::from_vec(dims, v).expect("volume matches")
}

fn unary_check<F, B>(op: &str, x: Dims, seed: u64, fwd: F, bwd: B) -> Result<OpCheck>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    B: Fn(&Tensor<f64>, &Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = if op.contains("max") { separated(x, &mut rng) } else { randn(x, &mut rng) };
    run(op, vec![x], TOL, seed, |l| {
        let y = fwd(&l[0])?;
        let (loss, dy) = probe(&y, seed)?;
        let dx = bwd(&l[0], &y, &dy)?;
        l[0].accumulate_grad(dx.data());
        Ok(loss)
    })
}

fn batch_norm_check(seed: u64) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let leaves = vec![
        randn([4, 3, 5, 5], &mut rng),
        randn([1, 3, 1, 1], &mut rng),
        randn([1, 3, 1, 1], &mut rng),
    ];
    run("batch_norm", leaves, TOL, seed, |l| {
        let mut s = BnState::new(3);
        s.gamma = l[1].detached().with_grad();
        s.beta = l[2].detached().with_grad();
        let (y, cache) = ops::batch_norm(&l[0], &mut s)?;
        let (loss, dy) = probe(&y, seed)?;
        let dx = ops::batch_norm_backward(&cache, &mut s, &dy)?;
        l[0].accumulate_grad(dx.data());
        l[1].accumulate_grad(s.gamma.grad().expect("gamma gradient"));
        l[2].accumulate_grad(s.beta.grad().expect("beta gradient"));
        Ok(loss)
    })
}

fn linear_check(seed: u64) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let leaves = vec![
        randn([3, 5, 1, 1], &mut rng),
        randn([4, 5, 1, 1], &mut rng),
        randn([1, 4, 1, 1], &mut rng),
    ];
    run("linear", leaves, LINEAR_TOL, seed, |l| {
        let mut w = l[1].detached().with_grad();
        let mut b = l[2].detached().with_grad();
        let y = ops::linear(&l[0], &w, Some(&b))?;
        let (loss, dy) = probe(&y, seed)?;
        let dx = ops::linear_backward(&l[0], &mut w, Some(&mut b), &dy)?;
        l[0].accumulate_grad(dx.data());
        l[1].accumulate_grad(w.grad().expect("weight gradient"));
        l[2].accumulate_grad(b.grad().expect("bias gradient"));
        Ok(loss)
    })
}

/// `g * softmax(theta^T phi)^T`, the attention core of the non-local block.
fn attention_check(seed: u64) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let leaves = vec![
        randn([2, 1, 3, 6], &mut rng),
        randn([2, 1, 3, 5], &mut rng),
        randn([2, 1, 3, 5], &mut rng),
    ];
    run("softmax_matmul_attention", leaves, TOL, seed, |l| {
        let logits = ops::matmul(&l[0], &l[1], true, false)?;
        let attn = ops::softmax_rows(&logits);
        let y = ops::matmul(&l[2], &attn, false, true)?;
        let (loss, dy) = probe(&y, seed)?;
        let (dg, dattn) = ops::matmul_backward(&l[2], &attn, false, true, &dy)?;
        let dlogits = ops::softmax_rows_backward(&attn, &dattn)?;
        let (dtheta, dphi) = ops::matmul_backward(&l[0], &l[1], true, false, &dlogits)?;
        l[0].accumulate_grad(dtheta.data());
        l[1].accumulate_grad(dphi.data());
        l[2].accumulate_grad(dg.data());
        Ok(loss)
    })
}

fn concat_check(seed: u64) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let leaves = vec![randn([2, 2, 3, 3], &mut rng), randn([2, 3, 3, 3], &mut rng)];
    run("concat_channels", leaves, TOL, seed, |l| {
        let y = ops::concat_channels(&[&l[0], &l[1]])?;
        let (loss, dy) = probe(&y, seed)?;
        let parts = ops::split_channels(&dy, &[2, 3])?;
        l[0].accumulate_grad(parts[0].data());
        l[1].accumulate_grad(parts[1].data());
        Ok(loss)
    })
}

/// Conv + bias branch + BN + ReLU. BN's shift keeps pre-activations away from
/// the ReLU kink, where central differences are not valid.
fn sb_block_check(op: &str, cfg: SbConfig, stride: usize, seed: u64) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = Conv2d::new(4, 4, 3, stride, 1, &mut rng);
    let mut block = BiasedConv::<f64>::new(conv, cfg, &mut rng)?;
    block.sb.mix.weight.data_mut().iter_mut().for_each(|v| *v *= 10.0);
    block.bn.state.beta.data_mut().iter_mut().for_each(|v| *v = 3.0);
    let x = randn([2, 4, 8, 8], &mut rng);
    module_check(op, &mut block, x, seed, |m, x| m.forward(x, Mode::Train), |m, dy| m.backward(dy))
}

fn nl_check(op: &str, compress_to: Option<usize>, seed: u64) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nl = NlBlock::<f64>::new(8, compress_to, &mut rng)?;
    // a zero gamma would block every gradient through the attention path
    nl.bn_z.state.gamma = randn([1, 8, 1, 1], &mut rng).with_grad();
    let x = Tensor::randn([2, 8, 5, 6], 0.5, &mut rng);
    module_check(op, &mut nl, x, seed, |m, x| m.forward(x, Mode::Train), |m, dy| m.backward(dy))
}

fn se_check(seed: u64) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut se = SeBlock::<f64>::new(32, 16, &mut rng)?;
    let x = randn([2, 32, 3, 3], &mut rng);
    module_check("se_block", &mut se, x, seed, |m, x| m.forward(x, Mode::Train), |m, dy| m.backward(dy))
}

/// Configurations exercised by the spatial-bias ablations.
pub fn sb_variants() -> Vec<(&'static str, SbConfig)> {
    let base = SbConfig {
        pool_size: 3,
        ..SbConfig::default()
    };
    vec![
        ("sb_block", base),
        (
            "sb_block_add",
            SbConfig {
                merge_mode: MergeMode::Add,
                bias_channels: 1,
                ..base
            },
        ),
        (
            "sb_block_maxpool",
            SbConfig {
                pool_mode: PoolMode::Max,
                ..base
            },
        ),
        (
            "sb_block_pool_only",
            SbConfig {
                pool_only: true,
                ..base
            },
        ),
    ]
}

/// Runs every check. Each entry carries its own tolerance in the report.
pub fn grad_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let s = seed;
    let mut out = vec![
        conv_check("conv2d", [2, 4, 8, 8], [6, 4, 3, 3], true, 1, 1, s)?,
        conv_check("conv2d_strided", [2, 3, 7, 7], [4, 3, 3, 3], false, 2, 1, s)?,
        conv_check("conv1d", [1, 36, 1, 5], [36, 36, 1, 3], true, 1, 0, s)?,
        unary_check(
            "adaptive_pool_average",
            [2, 3, 7, 9],
            s,
            |x| ops::adaptive_pool(x, 3, 4, PoolMode::Average),
            |x, _, dy| ops::adaptive_pool_backward(x, 3, 4, PoolMode::Average, dy),
        )?,
        unary_check(
            "adaptive_pool_max",
            [2, 3, 7, 9],
            s,
            |x| ops::adaptive_pool(x, 3, 4, PoolMode::Max),
            |x, _, dy| ops::adaptive_pool_backward(x, 3, 4, PoolMode::Max, dy),
        )?,
        unary_check(
            "max_pool2d",
            [2, 2, 8, 8],
            s,
            |x| ops::max_pool2d(x, 3, 2, 1),
            |x, _, dy| ops::max_pool2d_backward(x, 3, 2, 1, dy),
        )?,
        unary_check(
            "bilinear_upsample",
            [2, 3, 3, 4],
            s,
            |x| ops::bilinear_upsample(x, 7, 9),
            |x, _, dy| ops::bilinear_upsample_backward(x.dims(), dy),
        )?,
        unary_check("relu", [2, 3, 4, 4], s, |x| Ok(ops::relu(x)), |_, y, dy| ops::relu_backward(y, dy))?,
        unary_check(
            "global_avg_pool",
            [2, 3, 4, 5],
            s,
            |x| Ok(ops::global_avg_pool(x)),
            |x, _, dy| ops::global_avg_pool_backward(x.dims(), dy),
        )?,
        batch_norm_check(s)?,
        linear_check(s)?,
        attention_check(s)?,
        concat_check(s)?,
    ];
    for (name, cfg) in sb_variants() {
        out.push(sb_block_check(name, cfg, 1, s)?);
    }
    out.push(sb_block_check("sb_block_strided", sb_variants()[0].1, 2, s)?);
    out.push(nl_check("nl_block", None, s)?);
    out.push(nl_check("nl_block_compressed", Some(3), s)?);
    out.push(se_check(s)?);
    Ok(out)
}
