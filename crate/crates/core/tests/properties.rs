use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sbnet::backbone::{analytic_param_count, count_params, count_params_under, InsertionSpec, NetSpec, Network, Position};
use sbnet::checkpoint;
use sbnet::layers::Mode;
use sbnet::ops::{self, ConvParams, PoolMode};
use sbnet::spatial_bias::{sb_param_count, MergeMode, SbConfig, SpatialBias};
use sbnet::train::{self, CifarVariant, Dataset};
use sbnet::Tensor;

fn tensor(dims: [usize; 4], seed: u64) -> Tensor<f64> {
    Tensor::randn(dims, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn small_dims() -> impl Strategy<Value = [usize; 4]> {
    (1usize..3, 1usize..4, 1usize..7, 1usize..7).prop_map(|(n, c, h, w)| [n, c, h, w])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pointwise_identity_conv_is_exact(dims in small_dims(), seed: u64) {
        let x = tensor(dims, seed);
        let c = dims[1];
        let mut w = Tensor::zeros([c, c, 1, 1]);
        for i in 0..c {
            w.data_mut()[i * c + i] = 1.0;
        }
        let y = ops::conv2d(&x, &ConvParams::new(w, None, 1, 0)).unwrap();
        prop_assert_eq!(y.data(), x.data());
    }

    #[test]
    fn same_size_average_pool_is_identity(dims in small_dims(), seed: u64) {
        let x = tensor(dims, seed);
        let y = ops::adaptive_pool(&x, dims[2], dims[3], PoolMode::Average).unwrap();
        prop_assert_eq!(y.data(), x.data());
    }

    #[test]
    fn adaptive_windows_cover_every_row(input in 1usize..40, out in 1usize..40) {
        prop_assume!(out <= input);
        let mut covered = vec![false; input];
        for i in 0..out {
            let (s, e) = ops::pool::adaptive_window(i, input, out);
            prop_assert!(s < e && e <= input);
            covered[s..e].iter_mut().for_each(|c| *c = true);
        }
        prop_assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn upsampling_a_constant_is_exact(v in -1e3f64..1e3, h in 1usize..5, w in 1usize..5, oh in 1usize..12, ow in 1usize..12) {
        let x = Tensor::full([1, 2, h, w], v);
        let y = ops::bilinear_upsample(&x, oh, ow).unwrap();
        prop_assert!(y.data().iter().all(|&u| u == v));
    }

    #[test]
    fn upsampling_stays_within_input_range(dims in small_dims(), oh in 1usize..14, ow in 1usize..14, seed: u64) {
        let x = tensor(dims, seed);
        let y = ops::bilinear_upsample(&x, oh, ow).unwrap();
        for s in 0..dims[0] * dims[1] {
            let plane = dims[2] * dims[3];
            let src = &x.data()[s * plane..(s + 1) * plane];
            let (lo, hi) = src.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            for &v in &y.data()[s * oh * ow..(s + 1) * oh * ow] {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn concat_then_split_is_bit_exact(n in 1usize..3, c1 in 1usize..4, c2 in 1usize..4, h in 1usize..5, w in 1usize..5, seed: u64) {
        let a = tensor([n, c1, h, w], seed);
        let b = tensor([n, c2, h, w], seed ^ 1);
        let parts = ops::split_channels(&ops::concat_channels(&[&a, &b]).unwrap(), &[c1, c2]).unwrap();
        prop_assert_eq!(parts[0].data(), a.data());
        prop_assert_eq!(parts[1].data(), b.data());
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..30, scale in 0.1f64..50.0, seed: u64) {
        let x = Tensor::randn([1, 1, rows, cols], scale, &mut ChaCha8Rng::seed_from_u64(seed));
        let y = ops::softmax_rows(&x);
        for r in y.data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn conv_forward_is_deterministic(seed: u64, stride in 1usize..3) {
        let x = tensor([2, 3, 9, 9], seed).cast::<f32>();
        let w = tensor([4, 3, 3, 3], seed ^ 7).cast::<f32>();
        let p = ConvParams::new(w, None, stride, 1);
        let a = ops::conv2d(&x, &p).unwrap();
        let b = ops::conv2d(&x, &p).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn spatial_bias_is_per_sample(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sb = SpatialBias::<f64>::new(4, SbConfig::with_pool(3), &mut rng).unwrap();
        let x = tensor([3, 4, 7, 7], seed);
        let y = sb.generate(&x, 7, 7, Mode::Eval).unwrap();
        let perm = [2usize, 0, 1];
        let mut xp = Vec::new();
        for &p in &perm {
            xp.extend_from_slice(x.sample(p));
        }
        let yp = sb.generate(&Tensor::from_vec(x.dims(), xp).unwrap(), 7, 7, Mode::Eval).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            prop_assert_eq!(yp.sample(i), y.sample(p));
        }
    }

    #[test]
    fn built_sb_parameters_match_closed_form(c_in in 1usize..40, pool in 1usize..8, k in 1usize..5, n in 2usize..5, add: bool, pool_only: bool) {
        let cfg = SbConfig {
            pool_size: pool,
            bias_channels: k,
            kernel_width: n,
            merge_mode: if add { MergeMode::Add } else { MergeMode::Concat },
            pool_mode: PoolMode::Average,
            pool_only,
        };
        let sb = SpatialBias::<f32>::new(c_in, cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        prop_assert_eq!(sb.param_count(), sb_param_count(c_in, &cfg));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        tensors in prop::collection::vec(("[a-z.]{1,12}", small_dims(), any::<u64>()), 0..5)
    ) {
        let named: Vec<checkpoint::NamedTensor> = tensors
            .into_iter()
            .map(|(n, d, s)| (n, tensor(d, s).map(|v| v * 1e3).cast::<f32>()))
            .collect();
        let bytes = checkpoint::encode(&named).unwrap();
        let back = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), named.len());
        for ((na, ta), (nb, tb)) in named.iter().zip(&back) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(ta.dims(), tb.dims());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn checkpoint_decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = checkpoint::decode(&bytes);
        let mut framed = b"SBNT\x01\0\0\0".to_vec();
        framed.extend_from_slice(&bytes);
        let _ = checkpoint::decode(&framed);
    }

    #[test]
    fn cifar_write_parse_round_trip(labels in prop::collection::vec(0u32..100, 1..4), seed: u64, hundred: bool) {
        let variant = if hundred { CifarVariant::Cifar100 } else { CifarVariant::Cifar10 };
        let labels: Vec<u32> = labels.into_iter().map(|l| l % variant.num_classes() as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<u8> = (0..labels.len() * 3072).map(|_| rand::Rng::gen(&mut rng)).collect();
        let ds = Dataset {
            images,
            labels,
            coarse: None,
            num_classes: variant.num_classes(),
            side: 32,
            norm: variant.normalization(),
        };
        let bytes = train::write_cifar(&ds, variant).unwrap();
        prop_assert_eq!(bytes.len(), ds.len() * variant.record_len());
        let back = train::parse_cifar(&bytes, variant).unwrap();
        prop_assert_eq!(&back.images, &ds.images);
        prop_assert_eq!(&back.labels, &ds.labels);
        prop_assert_eq!(train::write_cifar(&back, variant).unwrap(), bytes);
    }

    #[test]
    fn top5_never_below_top1(rows in 1usize..20, seed: u64) {
        let logits = tensor([rows, 10, 1, 1], seed).cast::<f32>();
        let labels: Vec<u32> = (0..rows as u32).map(|i| (i * 7 + seed as u32) % 10).collect();
        let (h1, h5) = train::topk_hits(&logits, &labels);
        prop_assert!(h5 >= h1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    /// Two independent counting paths: the built network and the closed form.
    #[test]
    fn cifar_counts_agree(depth in prop::sample::select(vec![38usize, 65]), pool in 2usize..8, k in 1usize..5, s2: bool, conv1: bool) {
        let stages: Vec<usize> = if s2 { vec![1, 2] } else { vec![1] };
        let position = if conv1 { Position::AfterConv1 } else { Position::AfterConv2 };
        let cfg = SbConfig { pool_size: pool, bias_channels: k, ..SbConfig::default() };
        let spec = NetSpec::cifar(depth, 10).with(InsertionSpec::sb(&stages, cfg, position));
        let mut net = Network::<f32>::build(&spec, 0).unwrap();
        prop_assert_eq!(count_params(&mut net), analytic_param_count(&spec).unwrap());
        if !conv1 {
            let blocks = (depth - 2) / 9;
            let expected: usize = stages.iter().map(|&s| blocks * sb_param_count(16 << (s - 1), &cfg)).sum();
            prop_assert_eq!(count_params_under(&mut net, "sb."), expected);
        }
    }
}
