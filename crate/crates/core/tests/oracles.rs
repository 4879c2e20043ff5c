//! Independent reference computations checked against the library.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sbnet::backbone::{count_params, NetSpec, Network};
use sbnet::layers::{Linear, Mode, Module, ParamKind};
use sbnet::nonlocal::{block_param_count, BlockConfig, NlBlock};
use sbnet::ops::{self, PoolMode};
use sbnet::spatial_bias::{sb_param_count, SbConfig};
use sbnet::train::{self, Schedule, Sgd, TrainConfig};
use sbnet::{Error, Tensor};

/// Average pooling straight from the window definition.
fn brute_adaptive_avg(x: &[Vec<f64>], oh: usize, ow: usize) -> Vec<Vec<f64>> {
    let (h, w) = (x.len(), x[0].len());
    let lo = |i: usize, n: usize, o: usize| i * n / o;
    let hi = |i: usize, n: usize, o: usize| ((i + 1) * n).div_ceil(o);
    (0..oh)
        .map(|i| {
            (0..ow)
                .map(|j| {
                    let (r0, r1, c0, c1) = (lo(i, h, oh), hi(i, h, oh), lo(j, w, ow), hi(j, w, ow));
                    let sum: f64 = (r0..r1).flat_map(|r| (c0..c1).map(move |c| (r, c))).map(|(r, c)| x[r][c]).sum();
                    sum / ((r1 - r0) * (c1 - c0)) as f64
                })
                .collect()
        })
        .collect()
}

#[test]
fn row_index_average_pool_matches_brute_force() {
    let rows: Vec<Vec<f64>> = (0..6).map(|r| vec![r as f64; 6]).collect();
    let oracle = brute_adaptive_avg(&rows, 3, 3);
    let x = Tensor::from_vec([1, 1, 6, 6], rows.concat()).unwrap();
    let y = ops::adaptive_pool(&x, 3, 3, PoolMode::Average).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(y.at(0, 0, i, j), oracle[i][j]);
            assert_eq!(y.at(0, 0, i, j), [0.5, 2.5, 4.5][i]);
        }
    }
}

#[test]
fn uneven_average_pool_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f64>::randn([1, 1, 7, 10], 1.0, &mut rng);
    let rows: Vec<Vec<f64>> = x.data().chunks(10).map(<[f64]>::to_vec).collect();
    let oracle = brute_adaptive_avg(&rows, 3, 4);
    let y = ops::adaptive_pool(&x, 3, 4, PoolMode::Average).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            approx::assert_relative_eq!(y.at(0, 0, i, j), oracle[i][j], epsilon = 1e-12);
        }
    }
}

/// Per-pixel bilinear interpolation from the half-pixel formula.
fn brute_upsample(x: &[Vec<f64>], oh: usize, ow: usize) -> Vec<Vec<f64>> {
    let (h, w) = (x.len(), x[0].len());
    let src = |d: usize, n: usize, o: usize| ((d as f64 + 0.5) * n as f64 / o as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    (0..oh)
        .map(|i| {
            (0..ow)
                .map(|j| {
                    let (sy, sx) = (src(i, h, oh), src(j, w, ow));
                    let mut v = 0.0;
                    for (r, row) in x.iter().enumerate() {
                        for (c, &val) in row.iter().enumerate() {
                            let wy = (1.0 - (sy - r as f64).abs()).max(0.0);
                            let wx = (1.0 - (sx - c as f64).abs()).max(0.0);
                            v += wy * wx * val;
                        }
                    }
                    v
                })
                .collect()
        })
        .collect()
}

#[test]
fn two_by_two_upsample_matches_per_pixel_oracle() {
    let rows = vec![vec![0.0, 1.0], vec![2.0, 3.0]];
    let oracle = brute_upsample(&rows, 4, 4);
    let x = Tensor::from_vec([1, 1, 2, 2], rows.concat()).unwrap();
    let y = ops::bilinear_upsample(&x, 4, 4).unwrap();
    assert_eq!(y.at(0, 0, 0, 0), 0.0);
    // (1, 1) sits a quarter of the way from pixel 0 to pixel 1 on both axes
    assert_eq!(y.at(0, 0, 1, 1), 0.75 * 0.75 * 0.0 + 0.75 * 0.25 * 1.0 + 0.25 * 0.75 * 2.0 + 0.25 * 0.25 * 3.0);
    for i in 0..4 {
        for j in 0..4 {
            approx::assert_relative_eq!(y.at(0, 0, i, j), oracle[i][j], epsilon = 1e-12);
        }
    }
}

#[test]
fn odd_ratio_upsample_matches_per_pixel_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f64>::randn([1, 1, 3, 5], 1.0, &mut rng);
    let rows: Vec<Vec<f64>> = x.data().chunks(5).map(<[f64]>::to_vec).collect();
    let oracle = brute_upsample(&rows, 7, 11);
    let y = ops::bilinear_upsample(&x, 7, 11).unwrap();
    for i in 0..7 {
        for j in 0..11 {
            approx::assert_relative_eq!(y.at(0, 0, i, j), oracle[i][j], epsilon = 1e-12);
        }
    }
}

#[test]
fn sb_param_count_reference_values() {
    let cfg = SbConfig::with_pool(6);
    assert_eq!(sb_param_count(32, &cfg), 32 * 5 + 36 * 36 * 3 + 36);
    assert_eq!(sb_param_count(32, &cfg), 4084);
    assert_eq!(sb_param_count(256, &SbConfig::with_pool(10)), 256 * 5 + 100 * 100 * 3 + 100);
    let mix = |p: usize| (p * p) as f64 * (p * p) as f64;
    assert!((mix(10) / mix(6) - 7.7).abs() < 0.05);
    // k enters only through the reduce width C' = k + N - 1
    let k4 = SbConfig {
        bias_channels: 4,
        ..SbConfig::with_pool(10)
    };
    assert_eq!(sb_param_count(256, &k4) - sb_param_count(256, &SbConfig::with_pool(10)), 256);
}

#[test]
fn baseline_block_counts() {
    assert_eq!(block_param_count(&BlockConfig::Nl, 1024), 4 * 1024 * 512 + 2 * 1024);
    assert_eq!(block_param_count(&BlockConfig::Se { reduction: 16 }, 2048), 524_288);
    assert_eq!(block_param_count(&BlockConfig::Se { reduction: 16 }, 256), 8192);
}

#[test]
fn compressing_to_full_size_is_bit_identical() {
    let block = |compress| {
        let mut b = NlBlock::<f32>::new(8, compress, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        b.bn_z.state.gamma.data_mut().iter_mut().for_each(|v| *v = 1.0);
        b
    };
    let (mut a, mut b) = (block(None), block(Some(6)));
    let x = Tensor::randn([2, 8, 6, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let ya = a.forward(&x, Mode::Eval).unwrap();
    let yb = b.forward(&x, Mode::Eval).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ya), bits(&yb));
}

#[test]
fn classifier_macs() {
    let fc = Linear::<f32>::new(2048, 1000, true, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(fc.macs(), 2_048_000);
}

#[test]
fn network_forward_contract() {
    let mut net = Network::<f32>::build(&NetSpec::preset("sb-resnet38").unwrap(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let one = Tensor::<f32>::randn([1, 3, 32, 32], 1.0, &mut rng);
    let two = Tensor::from_vec([2, 3, 32, 32], [one.data(), one.data()].concat()).unwrap();
    let logits = net.forward(&two, Mode::Eval).unwrap();
    assert_eq!(logits.dims(), [2, 100, 1, 1]);
    assert_eq!(logits.sample(0), logits.sample(1));
    let zeros = net.forward(&Tensor::zeros([2, 3, 32, 32]), Mode::Eval).unwrap();
    assert!(zeros.first_non_finite().is_none());
}

#[test]
fn non_finite_output_names_the_layer() {
    let mut net = Network::<f32>::build(&NetSpec::cifar(38, 10), 0).unwrap();
    net.visit("", &mut |name, _, t| {
        if name == "s2.b0.conv2.conv.weight" {
            t.data_mut()[0] = f32::NAN;
        }
    });
    let e = net.forward(&Tensor::full([2, 3, 32, 32], 1.0), Mode::Train).unwrap_err();
    let msg = e.to_string();
    assert!(msg.contains("s2.b0"), "{msg}");
    assert!(matches!(e, Error::Layer { .. }));
}

#[test]
fn step_schedule_reference_values() {
    let cfg = TrainConfig::default();
    assert_eq!(
        cfg.schedule,
        Schedule::Step {
            period: 75,
            factor: 0.1
        }
    );
    assert_eq!(cfg.lr_at(0), 0.25);
    assert_eq!(cfg.lr_at(74), 0.25);
    assert!((cfg.lr_at(75) - 0.025).abs() < 1e-15);
}

#[test]
fn zero_epochs_gives_empty_series() {
    let mut net = Network::<f32>::build(&NetSpec::cifar(38, 10), 0).unwrap();
    let data = train::synthetic_dataset(20, 10, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let r = train::train(&mut net, &data, None, &cfg, None).unwrap();
    assert!(r.series.is_empty());
    assert_eq!(r.final_loss, None);
}

#[test]
fn zero_learning_rate_only_moves_running_stats() {
    let mut net = Network::<f32>::build(&NetSpec::preset("sb-resnet38").unwrap(), 0).unwrap();
    let snapshot = |net: &mut Network<f32>| {
        let mut v = Vec::new();
        net.visit("", &mut |name, kind, t| v.push((name.to_string(), kind, t.data().to_vec())));
        v
    };
    let before = snapshot(&mut net);
    let data = train::synthetic_dataset(16, 10, 0).unwrap();
    let idx: Vec<usize> = (0..16).collect();
    let mut opt = Sgd::new(0.9, 1e-4);
    train::train_step(&mut net, &mut opt, &data.batch(&idx, None), &data.labels, 0.0).unwrap();
    let after = snapshot(&mut net);
    let mut buffers_moved = false;
    for ((name, kind, a), (_, _, b)) in before.iter().zip(&after) {
        match kind {
            ParamKind::Learnable => assert_eq!(a, b, "{name} changed"),
            ParamKind::Buffer => buffers_moved |= a != b,
        }
    }
    assert!(buffers_moved);
}

#[test]
fn nearest_centroid_separates_synthetic_classes() {
    let data = train::synthetic_dataset(500, 10, 4).unwrap();
    let dim = data.image(0).len();
    let mut centroids = vec![vec![0.0f64; dim]; 10];
    let mut counts = [0usize; 10];
    for i in 0..data.len() {
        let c = data.labels[i] as usize;
        counts[c] += 1;
        for (s, &p) in centroids[c].iter_mut().zip(data.image(i)) {
            *s += p as f64;
        }
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let fresh = train::synthetic_dataset(500, 10, 5).unwrap();
    let correct = (0..fresh.len())
        .filter(|&i| {
            let img = fresh.image(i);
            let dist = |c: &Vec<f64>| c.iter().zip(img).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
            let best = (0..10).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            best as u32 == fresh.labels[i]
        })
        .count();
    assert!(correct * 2 > fresh.len(), "{correct}/{}", fresh.len());
}

#[test]
fn top_k_reference_cases() {
    let one_hot = Tensor::<f32>::from_vec([3, 4, 1, 1], vec![0., 1., 0., 0., 0., 0., 0., 1., 1., 0., 0., 0.]).unwrap();
    assert_eq!(train::topk_hits(&one_hot, &[1, 3, 0]), (3, 3));

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 20_000;
    let logits = Tensor::<f32>::randn([n, 100, 1, 1], 1.0, &mut rng);
    let labels: Vec<u32> = (0..n as u32).map(|i| i % 100).collect();
    let (h1, h5) = train::topk_hits(&logits, &labels);
    let top1 = 100.0 * h1 as f64 / n as f64;
    assert!((top1 - 1.0).abs() <= 1.0, "{top1}");
    assert!(h5 >= h1);
}

#[test]
fn short_training_lowers_loss() {
    let mut net = Network::<f32>::build(&NetSpec::cifar(38, 10), 0).unwrap();
    let data = train::synthetic_dataset(128, 10, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 32,
        lr: 0.05,
        ..TrainConfig::default()
    };
    let r = train::train(&mut net, &data, None, &cfg, None).unwrap();
    assert!(r.series.last().unwrap().loss < r.series[0].loss, "{:?}", r.series);
    assert!(count_params(&mut net) > 0);
}
