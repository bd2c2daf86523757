use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use recnet::accounting::{param_count, Convention};
use recnet::checkpoint::{Checkpoint, Metadata};
use recnet::data::{crop_flip, draw_augment, parse_records, synthetic, DatasetKind, Split, IMAGE_BYTES, PAD};
use recnet::model::ArchSpec;
use recnet::ops::{batchnorm_forward, conv2d_forward, BnState, Padding};
use recnet::optim::Schedule;
use recnet::{ConvKernel, CrcLayer, CrcSpec, CrcVariant, Dims4, Module, RecModule, RecNetConfig, RecNetModel, Tensor4};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn variant(i: usize) -> CrcVariant {
    [
        CrcVariant::Relu,
        CrcVariant::SharedBnRelu,
        CrcVariant::SeparateBnRelu,
        CrcVariant::Linear,
    ][i % 4]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear(seed in any::<u64>(), c in 1usize..4, h in 1usize..7, w in 1usize..7, k in prop::sample::select(vec![1usize, 3]),
                      a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng(seed);
        let dims = Dims4::new(2, c, h, w);
        let x = Tensor4::<f64>::randn(dims, 1.0, &mut r);
        let y = Tensor4::<f64>::randn(dims, 1.0, &mut r);
        let kern = ConvKernel::<f64>::he_normal(3, c, k, &mut r);
        let mix = Tensor4::new(dims, x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let lhs = conv2d_forward(&mix, &kern, None, Padding::Same).unwrap();
        let cx = conv2d_forward(&x, &kern, None, Padding::Same).unwrap();
        let cy = conv2d_forward(&y, &kern, None, Padding::Same).unwrap();
        for ((l, p), q) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
            prop_assert!((l - (a * p + b * q)).abs() < 1e-6);
        }
    }

    #[test]
    fn same_padding_keeps_spatial_dims(h in 1usize..40, w in 1usize..40, k in prop::sample::select(vec![1usize, 3])) {
        let x = Tensor4::<f32>::zeros(Dims4::new(1, 2, h, w));
        let out = conv2d_forward(&x, &ConvKernel::zeros(5, 2, k, k), None, Padding::Same).unwrap();
        prop_assert_eq!(out.dims(), Dims4::new(1, 5, h, w));
    }

    #[test]
    fn train_batchnorm_standardizes(seed in any::<u64>(), n in 1usize..4, c in 1usize..4, h in 2usize..6, shift in -50.0f64..50.0) {
        let mut r = rng(seed);
        let mut x = Tensor4::<f64>::randn(Dims4::new(n, c, h, h), 3.0, &mut r);
        for v in x.data_mut() {
            *v += shift;
        }
        let y = batchnorm_forward(&x, &mut BnState::new(c)).unwrap();
        let m = (n * h * h) as f64;
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|i| y.plane(i, ch).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / m;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            prop_assert!(mean.abs() < 1e-6 * (1.0 + shift.abs()));
            prop_assert!((var - 1.0).abs() < 1e-4 || var < 1e-4, "variance {var}");
        }
    }

    #[test]
    fn crc_output_width_and_history_only(seed in any::<u64>(), s_in in 1usize..3, s_out in 1usize..4, d in 2usize..5, v in 0usize..4) {
        let mut r = rng(seed);
        let spec = CrcSpec::new(s_in, s_out, d).variant(variant(v));
        let mut layer = CrcLayer::<f64>::new(spec, &mut r).unwrap();
        let x = Tensor4::<f64>::randn(Dims4::new(2, spec.c_in(), 4, 4), 1.0, &mut r);
        let j = d - 1;
        let mut xp = x.clone();
        for n in 0..2 {
            for ch in j * s_in..(j + 1) * s_in {
                for t in xp.plane_mut(n, ch) {
                    *t += 1.5;
                }
            }
        }
        let a = layer.forward(&x).unwrap();
        let b = layer.forward(&xp).unwrap();
        prop_assert_eq!(a.dims().c, d * s_out);
        let (ea, eb) = (a.narrow_channels(0, j * s_out).unwrap(), b.narrow_channels(0, j * s_out).unwrap());
        prop_assert_eq!(ea.data(), eb.data());
    }

    #[test]
    fn crc_conv_weights_ignore_d(s_in in 1usize..20, s_out in 1usize..20, d in 1usize..12, kx in prop::sample::select(vec![1usize, 3]),
                                 kh in prop::sample::select(vec![1usize, 3])) {
        let spec = CrcSpec::new(s_in, s_out, d).kernels(kx, kh);
        let layer = CrcLayer::<f32>::zeros(spec).unwrap();
        let norms = spec.variant.bn_params(s_out, d);
        let bias = if spec.variant.has_bias() { s_out } else { 0 };
        prop_assert_eq!(layer.param_count(), s_in * s_out * kx * kx + s_out * s_out * kh * kh + norms + bias);
    }

    #[test]
    fn rec_module_width_is_transition_width(seed in any::<u64>(), s_in in 1usize..3, s_out in 1usize..3, d in 1usize..5, c_out in 1usize..9) {
        let mut r = rng(seed);
        let mut m = RecModule::<f64>::new(CrcSpec::new(s_in, s_out, d), c_out, &mut r).unwrap();
        let x = Tensor4::<f64>::randn(Dims4::new(2, s_in * d, 3, 3), 1.0, &mut r);
        prop_assert_eq!(m.forward(&x).unwrap().dims(), Dims4::new(2, c_out, 3, 3));
    }

    #[test]
    fn arch_spec_round_trips(t in prop::array::uniform7(1usize..500)) {
        let s = ArchSpec(t).to_string();
        prop_assert_eq!(s.parse::<ArchSpec>().unwrap(), ArchSpec(t));
        prop_assert_eq!(format!("RecNet({s})").parse::<ArchSpec>().unwrap(), ArchSpec(t));
    }

    #[test]
    fn arch_spec_never_panics(s in ".{0,40}") {
        let _ = s.parse::<ArchSpec>();
    }

    #[test]
    fn record_parsing_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..8000), hundred in any::<bool>()) {
        let kind = if hundred { DatasetKind::Cifar100 } else { DatasetKind::Cifar10 };
        if let Ok(ds) = parse_records(&bytes, kind) {
            prop_assert_eq!(ds.to_bytes(), bytes);
        }
    }

    #[test]
    fn crop_preserves_size_and_offsets_stay_in_range(seed in any::<u64>()) {
        let mut r = rng(seed);
        let img: Vec<u8> = (0..IMAGE_BYTES).map(|i| (i % 251) as u8).collect();
        let (oy, ox, flip) = draw_augment(&mut r);
        prop_assert!(oy <= 2 * PAD && ox <= 2 * PAD);
        prop_assert_eq!(crop_flip(&img, oy, ox, flip).len(), IMAGE_BYTES);
        prop_assert_eq!(crop_flip(&img, PAD, PAD, false), img);
    }

    #[test]
    fn schedule_stays_in_band(lr0 in 1e-3f64..1.0, eta in 0.0f64..1e-3, epochs in 2usize..300, cut in 0.05f64..0.95) {
        let r = ((epochs as f64 * cut) as usize).max(1);
        let s = Schedule { lr0, eta_min: eta, epochs, restarts: if r < epochs { vec![r] } else { vec![] } };
        s.validate().unwrap();
        for e in 0..epochs {
            let lr = s.lr_at(e).unwrap();
            prop_assert!(lr <= lr0 + 1e-15 && lr >= eta - 1e-15);
            let start = s.period(e).0;
            prop_assert_eq!(lr == lr0, e == start);
            if e > start {
                prop_assert!(lr < s.lr_at(e - 1).unwrap());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn ledger_counts_match_built_model(e in 1usize..3, s in prop::array::uniform3(1usize..4), d in prop::array::uniform3(1usize..4),
                                       v in 0usize..4, classes in 2usize..12, seed in any::<u64>()) {
        let cfg = RecNetConfig::new([e, s[0], s[1], s[2], d[0], d[1], d[2]]).classes(classes).variant(variant(v));
        let mut model = RecNetModel::<f32>::new(cfg, &mut rng(seed)).unwrap();
        prop_assert_eq!(param_count(&cfg, Convention::WithBnAndBias) as usize, model.num_params());
    }

    #[test]
    fn totals_grow_with_expansion_and_depth(t in prop::array::uniform7(1usize..6), which in 0usize..4) {
        let base = RecNetConfig::new(t);
        let mut bigger = t;
        match which {
            0 => bigger[0] += 1,
            i => bigger[3 + i] += 1,
        }
        let grown = RecNetConfig::new(bigger);
        prop_assert!(param_count(&grown, Convention::WithBnAndBias) > param_count(&base, Convention::WithBnAndBias));
    }

    #[test]
    fn checkpoint_encoding_round_trips(seed in any::<u64>(), epoch in 0usize..1000) {
        let cfg = RecNetConfig::new([1, 2, 1, 2, 1, 2, 1]).classes(3);
        let mut model = RecNetModel::<f32>::new(cfg, &mut rng(seed)).unwrap();
        let ck = Checkpoint::from_model(&mut model, Metadata::new(cfg, epoch, seed));
        let bytes = ck.encode().unwrap();
        prop_assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);
        for cut in [0, 3, bytes.len() / 2, bytes.len() - 1] {
            prop_assert!(Checkpoint::decode(&bytes[..cut]).is_err());
        }
    }
}

#[test]
fn crop_offsets_are_uniform() {
    let mut r = rng(11);
    let side = 2 * PAD + 1;
    let mut counts = vec![0usize; side * side];
    let draws = 40_500;
    let mut flips = 0;
    for _ in 0..draws {
        let (oy, ox, f) = draw_augment(&mut r);
        counts[oy * side + ox] += 1;
        flips += f as usize;
    }
    let expect = draws as f64 / counts.len() as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    // 80 degrees of freedom; the 0.999 quantile is about 124.8
    assert!(chi2 < 124.8, "chi-square {chi2}");
    assert!((flips as f64 / draws as f64 - 0.5).abs() < 0.02);
}

#[test]
fn loader_round_trip_reproduces_bytes() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [DatasetKind::Cifar10, DatasetKind::Cifar100] {
        let ds = synthetic(kind, Split::Test, 17, 5, 3).unwrap();
        recnet::data::save(dir.path(), &ds, Split::Test).unwrap();
        let back = recnet::data::load(dir.path(), kind, Split::Test).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), ds.to_bytes());
    }
}
