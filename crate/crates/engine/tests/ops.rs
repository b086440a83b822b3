use fgcm_engine::{Adam, AdamConfig, BatchNormState, EngineError, Graph, ParamSet, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn conv2d_identity_kernel() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0)).unwrap();
    let w = g.constant(t(&[1, 1, 1, 1], &[1.0])).unwrap();
    let b = g.constant(t(&[1], &[0.0])).unwrap();
    let y = g.conv2d(x, w, Some(b), (1, 1), (0, 0)).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 3, 3]);
    assert_eq!(g.value(y).values(), &[1.0; 9]);
}

#[test]
fn conv2d_direct_sum() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let w = g.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let y = g.conv2d(x, w, None, (1, 1), (0, 0)).unwrap();
    assert_eq!(g.value(y).values(), &[5.0]);
}

#[test]
fn conv2d_stride_shape() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(vec![1, 1, 4, 4], 1.0)).unwrap();
    let w = g.constant(Tensor::full(vec![1, 1, 2, 2], 1.0)).unwrap();
    let y = g.conv2d(x, w, None, (2, 2), (0, 0)).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).values(), &[4.0; 4]);
}

#[test]
fn conv2d_channel_mismatch_names_axis() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(vec![1, 2, 4, 4], 1.0)).unwrap();
    let w = g.constant(Tensor::full(vec![1, 3, 2, 2], 1.0)).unwrap();
    match g.conv2d(x, w, None, (1, 1), (0, 0)) {
        Err(EngineError::Shape { axis, .. }) => assert_eq!(axis, "channel"),
        other => panic!("expected shape error, got {other:?}"),
    }
    let w = g.constant(Tensor::full(vec![1, 2, 5, 2], 1.0)).unwrap();
    match g.conv2d(x, w, None, (1, 1), (0, 0)) {
        Err(EngineError::Shape { axis, .. }) => assert_eq!(axis, "height"),
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn conv_transpose_scatters_single_element() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 1, 1], &[2.0])).unwrap();
    let w = g.constant(Tensor::full(vec![1, 1, 2, 2], 1.0)).unwrap();
    let y = g.conv_transpose2d(x, w, None, (1, 1), (0, 0)).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).values(), &[2.0; 4]);
}

#[test]
fn conv_transpose_stride_shape() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(vec![1, 1, 2, 2], 1.0)).unwrap();
    let w = g.constant(Tensor::full(vec![1, 1, 2, 2], 1.0)).unwrap();
    let y = g.conv_transpose2d(x, w, None, (2, 2), (0, 0)).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 4, 4]);
}

#[test]
fn conv_transpose_equals_conv_input_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[1, 2, 3, 3]);
    let w = random(&mut rng, &[3, 2, 2, 2]);
    let upstream = random(&mut rng, &[1, 3, 2, 2]);

    let mut g = Graph::new();
    let xv = g.param(x).unwrap();
    let wv = g.constant(w.clone()).unwrap();
    let y = g.conv2d(xv, wv, None, (1, 1), (0, 0)).unwrap();
    let l = g.weighted_sum(y, upstream.values().to_vec()).unwrap();
    g.backward(l).unwrap();
    let dx = g.grad(xv).unwrap().to_vec();

    let mut h = Graph::new();
    let u = h.constant(upstream).unwrap();
    let wv = h.constant(w).unwrap();
    let z = h.conv_transpose2d(u, wv, None, (1, 1), (0, 0)).unwrap();
    for (a, b) in dx.iter().zip(h.value(z).values()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn batchnorm_train_standardizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[4, 3, 5, 5]);
    let mut g = Graph::new();
    let xv = g.constant(x).unwrap();
    let gamma = g.constant(Tensor::full(vec![3], 1.0)).unwrap();
    let beta = g.constant(Tensor::zeros(vec![3])).unwrap();
    let mut st = BatchNormState::new(3);
    let y = g.batchnorm2d(xv, gamma, beta, &mut st, true, 0.1, 1e-5).unwrap();
    let v = g.value(y).values();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| v[(n * 3 + c) * 25..(n * 3 + c + 1) * 25].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }
    assert_ne!(st.running_mean, vec![0.0; 3]);
}

#[test]
fn batchnorm_constant_channel_outputs_beta() {
    let mut g = Graph::new();
    let xv = g.constant(Tensor::full(vec![2, 1, 3, 3], 4.2)).unwrap();
    let gamma = g.constant(Tensor::full(vec![1], 3.0)).unwrap();
    let beta = g.constant(Tensor::full(vec![1], 1.0)).unwrap();
    let mut st = BatchNormState::new(1);
    let y = g.batchnorm2d(xv, gamma, beta, &mut st, true, 0.1, 1e-5).unwrap();
    assert!(g.value(y).values().iter().all(|&v| v == 1.0));
}

#[test]
fn batchnorm_eval_uses_running_stats() {
    let mut g = Graph::new();
    let xv = g.constant(t(&[1, 1, 1, 1], &[4.0])).unwrap();
    let gamma = g.constant(t(&[1], &[1.0])).unwrap();
    let beta = g.constant(t(&[1], &[0.0])).unwrap();
    let mut st = BatchNormState {
        running_mean: vec![2.0],
        running_var: vec![4.0],
    };
    let y = g.batchnorm2d(xv, gamma, beta, &mut st, false, 0.1, 0.0).unwrap();
    assert_eq!(g.value(y).values(), &[1.0]);
    assert_eq!(st.running_mean, vec![2.0]);
}

#[test]
fn batchnorm_train_needs_two_values() {
    let mut g = Graph::new();
    let xv = g.constant(t(&[1, 1, 1, 1], &[4.0])).unwrap();
    let gamma = g.constant(t(&[1], &[1.0])).unwrap();
    let beta = g.constant(t(&[1], &[0.0])).unwrap();
    let mut st = BatchNormState::new(1);
    assert!(matches!(
        g.batchnorm2d(xv, gamma, beta, &mut st, true, 0.1, 1e-5),
        Err(EngineError::BatchTooSmall { count: 1 })
    ));
}

#[test]
fn activations_by_definition() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).values(), &[0.0, 0.0, 2.0]);
    let x = g.constant(t(&[2], &[-2.0, 3.0])).unwrap();
    let y = g.leaky_relu(x, 0.2).unwrap();
    assert!((g.value(y).values()[0] + 0.4).abs() < 1e-15);
    assert_eq!(g.value(y).values()[1], 3.0);
    assert!(g.leaky_relu(x, 1.0).is_err());
}

#[test]
fn mfm_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2, 1, 1], &[1.0, 3.0])).unwrap();
    let y = g.mfm(x).unwrap();
    assert_eq!(g.value(y).values(), &[3.0]);
    assert_eq!(g.shape(y), &[1, 1, 1, 1]);

    let x = g.constant(Tensor::full(vec![1, 3, 2, 2], 0.0)).unwrap();
    assert!(matches!(g.mfm(x), Err(EngineError::Shape { axis: "channel", .. })));
}

#[test]
fn mfm_matches_brute_force_pairing() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[1, 4, 2, 2]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let y = g.mfm(xv).unwrap();
    let v = x.values();
    for k in 0..2 {
        for i in 0..4 {
            let want = v[k * 4 + i].max(v[(k + 2) * 4 + i]);
            assert_eq!(g.value(y).values()[k * 4 + i], want);
        }
    }
}

#[test]
fn mfm_tie_routes_gradient_to_first_half() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 2], &[1.5, 1.5])).unwrap();
    let y = g.mfm(x).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0]);
}

#[test]
fn maxpool_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let y = g.maxpool2d(x, (2, 2), (2, 2)).unwrap();
    assert_eq!(g.value(y).values(), &[4.0]);

    let x = g.param(Tensor::full(vec![1, 1, 4, 4], 0.5)).unwrap();
    let y = g.maxpool2d(x, (2, 2), (2, 2)).unwrap();
    assert_eq!(g.value(y).values(), &[0.5; 4]);
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    let grad = g.grad(x).unwrap();
    let mut want = vec![0.0; 16];
    for idx in [0, 2, 8, 10] {
        want[idx] = 1.0;
    }
    assert_eq!(grad, want.as_slice());

    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(vec![1, 1, 2, 2], 0.0)).unwrap();
    assert!(g.maxpool2d(x, (3, 3), (1, 1)).is_err());
}

#[test]
fn maxpool_matches_brute_force_window_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random(&mut rng, &[1, 1, 6, 6]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let y = g.maxpool2d(xv, (3, 3), (3, 3)).unwrap();
    let v = x.values();
    for bi in 0..2 {
        for bj in 0..2 {
            let mut m = f64::NEG_INFINITY;
            for i in 0..3 {
                for j in 0..3 {
                    m = m.max(v[(bi * 3 + i) * 6 + bj * 3 + j]);
                }
            }
            assert_eq!(g.value(y).values()[bi * 2 + bj], m);
        }
    }
}

#[test]
fn affine_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 2], &[1.0, -2.0, 3.5, 4.0])).unwrap();
    let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let b = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
    let y = g.affine(x, w, b).unwrap();
    assert_eq!(g.value(y).values(), &[1.0, -2.0, 3.5, 4.0]);

    let x = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0])).unwrap();
    let w = g.constant(Tensor::full(vec![3, 1], 1.0)).unwrap();
    let b = g.constant(t(&[1], &[1.0])).unwrap();
    let y = g.affine(x, w, b).unwrap();
    assert_eq!(g.value(y).values(), &[7.0]);

    let bad = g.constant(Tensor::full(vec![2, 1], 1.0)).unwrap();
    assert!(matches!(g.affine(x, bad, b), Err(EngineError::Shape { axis: "inner", .. })));
}

#[test]
fn dropout_eval_and_zero_probability_are_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[3, 7]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let y = g.dropout(xv, 0.4, false, &mut rng).unwrap();
    assert_eq!(g.value(y).values(), x.values());
    let y = g.dropout(xv, 0.0, true, &mut rng).unwrap();
    assert_eq!(g.value(y).values(), x.values());
    assert!(matches!(g.dropout(xv, 1.0, true, &mut rng), Err(EngineError::Param(_))));
}

#[test]
fn dropout_mean_within_three_sigma() {
    let n = 100_000;
    let p = 0.4;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(vec![n], 1.0)).unwrap();
    let y = g.dropout(x, p, true, &mut rng).unwrap();
    let mean = g.value(y).values().iter().sum::<f64>() / n as f64;
    // each element is 0 or 1/(1-p): variance p/(1-p) per element
    let sigma = (p / (1.0 - p) / n as f64).sqrt();
    assert!((mean - 1.0).abs() < 3.0 * sigma, "mean {mean}, sigma {sigma}");
}

#[test]
fn dropout_mask_reproducible_from_seed() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![64], 1.0)).unwrap();
        let y = g.dropout(x, 0.4, true, &mut rng).unwrap();
        g.value(y).values().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn loss_examples() {
    let mut g = Graph::new();
    let x = t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]);
    let xv = g.constant(x.clone()).unwrap();
    let l = g.mse(xv, &x).unwrap();
    assert_eq!(g.value(l).values(), &[0.0]);

    let z = g.constant(t(&[1, 2], &[0.0, 0.0])).unwrap();
    let l = g.softmax_cross_entropy(z, &[0]).unwrap();
    assert!((g.value(l).values()[0] - std::f64::consts::LN_2).abs() < 1e-12);

    assert!(g.softmax_cross_entropy(z, &[2]).is_err());
    assert!(g.mse(z, &x).is_err());
}

#[test]
fn non_finite_values_are_reported() {
    let mut g = Graph::<f64>::new();
    assert!(matches!(
        g.constant(t(&[2], &[1.0, f64::NAN])),
        Err(EngineError::NonFinite { .. })
    ));
    let x = g.constant(t(&[1, 1, 1, 1], &[1e300])).unwrap();
    let w = g.constant(t(&[1, 1, 1, 1], &[1e300])).unwrap();
    assert!(matches!(
        g.conv2d(x, w, None, (1, 1), (0, 0)),
        Err(EngineError::NonFinite { op: "conv2d" })
    ));
}

#[test]
fn pad_then_crop_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[2, 1, 5, 3]);
    let mut g = Graph::new();
    let xv = g.param(x.clone()).unwrap();
    let p = g.pad_hw(xv, 1, 2).unwrap();
    assert_eq!(g.shape(p), &[2, 1, 6, 5]);
    let c = g.crop_hw(p, 5, 3).unwrap();
    assert_eq!(g.value(c).values(), x.values());
    let s = g.sum(c).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(xv).unwrap(), vec![1.0; 30].as_slice());
}

/// Hyperparameter draw for which conv2d and conv_transpose2d shapes line up.
fn matched_geometry(rng: &mut ChaCha8Rng) -> ([usize; 4], [usize; 4], usize, usize) {
    loop {
        let k = rng.gen_range(1..5);
        let s = rng.gen_range(1..4);
        let p = rng.gen_range(0..3);
        let h = rng.gen_range(1..9);
        let w = rng.gen_range(1..9);
        if h + 2 * p < k || w + 2 * p < k {
            continue;
        }
        if (h + 2 * p - k) % s != 0 || (w + 2 * p - k) % s != 0 {
            continue;
        }
        if (h + 2 * p - k) / s + 1 == 0 || p * 2 >= (h + 2 * p - k) / s * s + k {
            continue;
        }
        let (n, c, f) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        return ([n, c, h, w], [f, c, k, k], s, p);
    }
}

fn adjoint_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (xs, ws, s, p) = matched_geometry(&mut rng);
    let x = random(&mut rng, &xs);
    let w = random(&mut rng, &ws);
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let wv = g.constant(w).unwrap();
    let y = g.conv2d(xv, wv, None, (s, s), (p, p)).unwrap();
    let ys = g.shape(y).to_vec();
    let probe = random(&mut rng, &ys);
    let pv = g.constant(probe.clone()).unwrap();
    let back = g.conv_transpose2d(pv, wv, None, (s, s), (p, p)).unwrap();
    assert_eq!(g.shape(back), x.shape());
    (dot(g.value(y).values(), probe.values()) - dot(x.values(), g.value(back).values())).abs()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_transpose_is_adjoint_of_conv(seed in any::<u64>()) {
        prop_assert!(adjoint_gap(seed) < 1e-8);
    }

    #[test]
    fn mfm_of_duplicated_input_is_input(vals in proptest::collection::vec(-10.0f64..10.0, 1..24)) {
        let n = vals.len();
        let mut doubled = vals.clone();
        doubled.extend_from_slice(&vals);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2 * n], doubled).unwrap()).unwrap();
        let y = g.mfm(x).unwrap();
        prop_assert_eq!(g.shape(y), &[1, n]);
        prop_assert_eq!(g.value(y).values(), vals.as_slice());
    }

    #[test]
    fn dropout_eval_is_bit_identical(vals in proptest::collection::vec(-1e6f64..1e6, 1..64), p in 0.0f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![vals.len()], vals.clone()).unwrap()).unwrap();
        let y = g.dropout(x, p, false, &mut rng).unwrap();
        prop_assert_eq!(g.value(y).values(), vals.as_slice());
    }
}

#[test]
fn decay_with_zero_gradient_shrinks_the_norm_every_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut p = ParamSet::new();
    p.insert("a", random(&mut rng, &[3, 4]));
    p.insert("b", random(&mut rng, &[5]));
    let mut opt = Adam::new(AdamConfig::default(), &p).unwrap();
    let zeros = vec![vec![0.0; 12], vec![0.0; 5]];
    let mut last = p.sum_squares();
    for _ in 0..10 {
        opt.step(&mut p, &zeros).unwrap();
        let now = p.sum_squares();
        assert!(now < last, "{now} !< {last}");
        last = now;
    }
}
