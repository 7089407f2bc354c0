use cascade_cs::gradcheck::{check_asrnet_on, check_csrnet_on, TOLERANCE};
use cascade_cs::models::{
    asrnet_backward, asrnet_forward, conv_stack_forward, csrnet_backward, csrnet_forward, flop_count, ConvStackParams,
    FcLayer,
};
use cascade_cs::nn::{adam_step, AdamConfig, AdamState};
use cascade_cs::rng::SeededRng;
use cascade_cs::sensing::{adjoint_with, sample_with};
use cascade_cs::{
    Architecture, AsrNet64, AsrNetParams, CsrNet64, CsrNetParams, Error, FormatError, Model, Model32, Model64,
    Network, SensingConfig, StackShape, Tensor, Tensor64, TensorSet,
};

fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor64 {
    Tensor::from_fn(shape, |_| rng.uniform_in(-1.0, 1.0))
}

fn small(block: usize, m: usize) -> SensingConfig {
    SensingConfig::from_measurements(block, m).unwrap()
}

fn zero_stack(shape: &StackShape) -> ConvStackParams<f64> {
    ConvStackParams::zeros(shape)
}

/// Zero-padded same-size cross-correlation, written out directly.
fn naive_conv(input: &[f64], c_in: usize, side: usize, kernels: &Tensor64, bias: &Tensor64) -> Vec<f64> {
    let (o_n, k) = (kernels.shape()[0], kernels.shape()[2]);
    let p = (k / 2) as isize;
    let mut out = vec![0.0; o_n * side * side];
    for o in 0..o_n {
        for i in 0..side {
            for j in 0..side {
                let mut acc = bias.data()[o];
                for c in 0..c_in {
                    for u in 0..k {
                        for v in 0..k {
                            let (y, x) = (i as isize + u as isize - p, j as isize + v as isize - p);
                            if (0..side as isize).contains(&y) && (0..side as isize).contains(&x) {
                                acc += kernels.data()[((o * c_in + c) * k + u) * k + v]
                                    * input[(c * side + y as usize) * side + x as usize];
                            }
                        }
                    }
                }
                out[(o * side + i) * side + j] = acc;
            }
        }
    }
    out
}

#[test]
fn stack_matches_naive_composition() {
    let mut rng = SeededRng::new(3);
    let params = ConvStackParams::<f64>::he_normal(&StackShape::DEFAULT, &mut rng);
    let input = random(&[1, 5, 5], &mut rng);
    let (out, _) = conv_stack_forward(&input, &params).unwrap();

    let mut x = input.data().to_vec();
    let mut c = 1;
    for (l, layer) in params.layers.iter().enumerate() {
        x = naive_conv(&x, c, 5, &layer.kernels, &layer.bias);
        if l < 2 {
            x.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        c = layer.kernels.shape()[0];
    }
    assert_eq!(out.shape(), &[1, 5, 5]);
    for (a, b) in out.data().iter().zip(&x) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn stack_output_shape_at_block_32() {
    let mut rng = SeededRng::new(1);
    let params = ConvStackParams::<f32>::he_normal(&StackShape::DEFAULT, &mut rng);
    let (out, _) = conv_stack_forward(&Tensor::zeros(&[1, 32, 32]), &params).unwrap();
    assert_eq!(out.shape(), &[1, 32, 32]);
}

#[test]
fn zero_stack_gives_zero_output() {
    let mut rng = SeededRng::new(2);
    let (out, _) = conv_stack_forward(&random(&[1, 8, 8], &mut rng), &zero_stack(&StackShape::DEFAULT)).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn csrnet_zero_residual_returns_deep_output() {
    let config = small(8, 16);
    let mut params = CsrNet64::init(config, StackShape::SMALL, 1, 2).unwrap();
    params.residual_stack = zero_stack(&StackShape::SMALL);
    let y = random(&[16], &mut SeededRng::new(4));
    let (out, _) = csrnet_forward(&y, &params).unwrap();
    let x0 = params.initial_fc.forward(&y).unwrap().reshape(&[1, 8, 8]).unwrap();
    let (deep, _) = conv_stack_forward(&x0, &params.deep_stack).unwrap();
    assert_eq!(out.data(), deep.data());
}

#[test]
fn csrnet_constant_from_biases() {
    // with every weight zero the output is the deep stack's last bias
    let config = small(8, 16);
    let shape = StackShape::SMALL;
    let mut fc = FcLayer::zeros(64, 16, true);
    fc.bias = Some(Tensor::filled(&[64], 0.7));
    let mut deep = zero_stack(&shape);
    deep.layers[2].bias = Tensor::filled(&[1], 0.3);
    let params = CsrNet64::from_parts(config, 5, fc, deep, zero_stack(&shape)).unwrap();
    let (out, _) = csrnet_forward(&random(&[16], &mut SeededRng::new(1)), &params).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.3));
}

#[test]
fn zero_upstream_gives_zero_grads() {
    let config = small(8, 16);
    let mut rng = SeededRng::new(6);
    let csr = CsrNet64::init(config, StackShape::SMALL, 1, 2).unwrap();
    let (_, cache) = csrnet_forward(&random(&[16], &mut rng), &csr).unwrap();
    let g = csrnet_backward(&cache, &Tensor::zeros(&[8, 8]), &csr).unwrap();
    assert!(g.is_all_zero());
    let shapes = |t: Vec<&Tensor64>| t.iter().map(|x| x.shape().to_vec()).collect::<Vec<_>>();
    assert_eq!(shapes(g.tensors()), shapes(csr.tensors()));

    let asr = AsrNet64::init(config, StackShape::SMALL, 3, false).unwrap();
    let (_, _, cache) = asrnet_forward(&random(&[8, 8], &mut rng), &asr).unwrap();
    let g = asrnet_backward(&cache, &Tensor::zeros(&[8, 8]), &asr).unwrap();
    assert!(g.is_all_zero());
    assert_eq!(shapes(g.tensors()), shapes(asr.tensors()));
}

#[test]
fn stale_cache_is_refused() {
    let config = small(8, 16);
    let mut rng = SeededRng::new(7);
    let mut csr = CsrNet64::init(config, StackShape::SMALL, 1, 2).unwrap();
    let (_, cache) = csrnet_forward(&random(&[16], &mut rng), &csr).unwrap();
    csr.tensors_mut()[0].data_mut()[0] += 1.0;
    assert!(matches!(
        csrnet_backward(&cache, &Tensor::zeros(&[8, 8]), &csr),
        Err(Error::StaleCache { .. })
    ));

    let mut asr = AsrNet64::init(config, StackShape::SMALL, 3, false).unwrap();
    let (_, _, cache) = asrnet_forward(&random(&[8, 8], &mut rng), &asr).unwrap();
    asr.touch();
    assert!(matches!(
        asrnet_backward(&cache, &Tensor::zeros(&[8, 8]), &asr),
        Err(Error::StaleCache { .. })
    ));
}

#[test]
fn selector_round_trip_equals_adjoint() {
    let (b, m) = (4, 6);
    let n = b * b;
    let mut sampling = FcLayer::<f64>::zeros(m, n, false);
    for r in 0..m {
        sampling.weights.data_mut()[r * n + r] = 1.0;
    }
    let mut initial = FcLayer::zeros(n, m, false);
    for r in 0..m {
        initial.weights.data_mut()[r * m + r] = 1.0;
    }
    let selector = sampling.weights.clone();
    let params = AsrNet64::from_parts(small(b, m), sampling, initial, zero_stack(&StackShape::SMALL)).unwrap();
    let block = random(&[b, b], &mut SeededRng::new(8));
    let (out, y, _) = asrnet_forward(&block, &params).unwrap();
    assert_eq!(y.len(), m);
    let expect = adjoint_with(&sample_with(&block, &selector).unwrap(), &selector).unwrap();
    assert_eq!(out.data(), expect.data());
}

#[test]
fn measurement_length_follows_rate() {
    for (rate, m) in [(0.25, 256), (0.10, 102), (0.04, 40), (0.01, 10)] {
        let config = SensingConfig::new(32, rate).unwrap();
        let params = AsrNetParams::<f32>::init(config, StackShape::SMALL, 0, false).unwrap();
        assert_eq!(params.measure(&Tensor::zeros(&[32, 32])).unwrap().len(), m);
    }
}

#[test]
fn four_measurement_gradients() {
    let config = small(4, 4);
    let shape = StackShape {
        channels: [4, 3, 1],
        kernels: [3, 1, 3],
    };
    for seed in 0..3 {
        let r = check_csrnet_on(config, shape, seed, None).unwrap();
        assert!(r.max_relative_error < TOLERANCE, "{r:?}");
        let r = check_asrnet_on(config, shape, seed, None).unwrap();
        assert!(r.max_relative_error < TOLERANCE, "{r:?}");
    }
}

#[test]
fn one_adam_step_moves_sampling_layer() {
    let config = small(8, 16);
    let mut params = AsrNet64::init(config, StackShape::SMALL, 11, false).unwrap();
    let block = random(&[8, 8], &mut SeededRng::new(12)).map(|v| v.abs());
    let before = params.sampling_fc.weights.clone();
    let (loss, grads) = params.loss_and_grads(&block, &block).unwrap();
    assert!(loss > 0.0);
    let mut states: Vec<AdamState<f64>> = params.tensors().iter().map(|t| AdamState::new(t.shape())).collect();
    for ((p, g), s) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(&mut states) {
        adam_step(p, g, s, &AdamConfig::default()).unwrap();
    }
    let moved: f64 = before
        .data()
        .iter()
        .zip(params.sampling_fc.weights.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    assert!(moved > 0.0);
}

#[test]
fn init_is_deterministic_with_expected_scale() {
    let config = SensingConfig::new(32, 0.25).unwrap();
    let a = CsrNetParams::<f32>::init(config, StackShape::DEFAULT, 5, 5).unwrap();
    let b = CsrNetParams::<f32>::init(config, StackShape::DEFAULT, 5, 5).unwrap();
    for (x, y) in a.tensors().iter().zip(b.tensors()) {
        assert_eq!(x.data(), y.data());
    }
    let w = a.deep_stack.layers[0].kernels.data();
    let std = (w.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
    let expect = (2.0f64 / 121.0).sqrt();
    assert!((std / expect - 1.0).abs() < 0.1, "std {std} vs {expect}");

    let fc = a.initial_fc.weights.data();
    let fc_std = (fc.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / fc.len() as f64).sqrt();
    assert!((fc_std / (1.0f64 / 256.0).sqrt() - 1.0).abs() < 0.05);
    assert!(a.initial_fc.bias.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
    assert!(a.deep_stack.layers.iter().all(|l| l.bias.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn flop_counts() {
    let config = SensingConfig::new(32, 0.10).unwrap();
    let stack = 11_632_640;
    assert_eq!(flop_count(Architecture::CsrNet, &config, &StackShape::DEFAULT), 102 * 1024 + 2 * stack);
    assert_eq!(flop_count(Architecture::AsrNet, &config, &StackShape::DEFAULT), 102 * 1024 + stack);
}

#[test]
fn round_trip_is_bit_identical() {
    let config = small(8, 16);
    for arch in [Architecture::CsrNet, Architecture::AsrNet] {
        let model = Model32::init(arch, config, StackShape::SMALL, 21).unwrap();
        let bytes = model.to_bytes();
        let back = Model32::from_bytes(&bytes).unwrap();
        assert_eq!(back.architecture(), arch);
        assert_eq!(back.to_bytes(), bytes);
        for (a, b) in model.tensors().iter().zip(back.tensors()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(&b));
        }
    }
}

#[test]
fn f64_models_store_f32() {
    let model = Model64::init(Architecture::AsrNet, small(8, 16), StackShape::SMALL, 2).unwrap();
    let back = Model64::from_bytes(&model.to_bytes()).unwrap();
    for (a, b) in model.tensors().iter().zip(back.tensors()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x as f32, *y as f32);
        }
    }
}

#[test]
fn csrnet_file_regenerates_matrix() {
    let config = small(8, 16);
    let model = Model64::init(Architecture::CsrNet, config, StackShape::SMALL, 33).unwrap();
    let back = Model64::from_bytes(&model.to_bytes()).unwrap();
    let (Model::CsrNet(a), Model::CsrNet(b)) = (&model, &back) else {
        panic!("architecture changed");
    };
    assert_eq!(a.matrix_seed, b.matrix_seed);
    assert_eq!(a.measurement_operator(), b.measurement_operator());
}

#[test]
fn load_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model32::init(Architecture::CsrNet, small(8, 16), StackShape::SMALL, 1).unwrap();
    let bytes = model.to_bytes();

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(
        Model32::from_bytes(&bad_magic),
        Err(Error::Format(FormatError::BadMagic { .. }))
    ));

    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    assert!(matches!(
        Model32::from_bytes(&bad_version),
        Err(Error::Format(FormatError::UnsupportedVersion { version: 9, .. }))
    ));

    assert!(matches!(
        Model32::from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Format(FormatError::Truncated { .. }))
    ));

    let path = dir.path().join("csr.cscn");
    model.save(&path).unwrap();
    assert!(matches!(
        AsrNetParams::<f32>::load(&path),
        Err(Error::Format(FormatError::Architecture { .. }))
    ));
    assert!(CsrNetParams::<f32>::load(&path).is_ok());

    let mut trailing = bytes;
    trailing.push(0);
    assert!(Model32::from_bytes(&trailing).is_err());
}

#[test]
fn dimension_errors() {
    let config = small(8, 16);
    let csr = CsrNet64::init(config, StackShape::SMALL, 1, 2).unwrap();
    assert!(matches!(csrnet_forward(&Tensor::zeros(&[15]), &csr), Err(Error::Dimension { .. })));
    let asr = AsrNet64::init(config, StackShape::SMALL, 1, false).unwrap();
    assert!(matches!(asrnet_forward(&Tensor::zeros(&[7, 8]), &asr), Err(Error::Dimension { .. })));
    let fc = FcLayer::zeros(64, 15, true);
    assert!(CsrNet64::from_parts(config, 0, fc, zero_stack(&StackShape::SMALL), zero_stack(&StackShape::SMALL)).is_err());
}
