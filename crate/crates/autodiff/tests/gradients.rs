use fade_autodiff::{
    apply_network, finite_difference_check, masked_adam_step, Activation, AdamConfig, AdamState, AutodiffError,
    GradCheckConfig, Mlp, ParamMode, ParameterStore, Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn store_with(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> ParameterStore {
    let mut s = ParameterStore::new();
    for (name, shape, data) in entries {
        s.insert(*name, Tensor::new(shape.clone(), data.clone()).unwrap()).unwrap();
    }
    s
}

fn single_layer(w: Vec<f64>, b: Vec<f64>) -> (Mlp, ParameterStore) {
    let arch = Mlp::new(vec![2.max(b.len()), b.len()], Activation::Identity).unwrap();
    let n = b.len();
    let s = store_with(&[("layer0.weight", vec![n, n], w), ("layer0.bias", vec![n], b)]);
    (arch, s)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

#[test]
fn identity_layer_passes_input_through() {
    let (arch, s) = single_layer(
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        vec![0.0; 3],
    );
    let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let (y, _) = apply_network(&s, &arch, &x, None).unwrap();
    assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn scaled_layer_with_bias() {
    let (arch, s) = single_layer(vec![2.0, 0.0, 0.0, 2.0], vec![1.0, 1.0]);
    let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
    let (y, _) = apply_network(&s, &arch, &x, None).unwrap();
    assert_eq!(y.data(), &[3.0, 3.0]);
}

#[test]
fn zero_width_input_is_a_dimension_error() {
    assert!(matches!(
        Tensor::new(vec![1, 0], vec![]),
        Err(AutodiffError::Dimension { .. })
    ));
    let (arch, s) = single_layer(vec![2.0, 0.0, 0.0, 2.0], vec![1.0, 1.0]);
    let x = Tensor::new(vec![1, 3], vec![1.0, 1.0, 1.0]).unwrap();
    match apply_network(&s, &arch, &x, None) {
        Err(AutodiffError::Dimension { context, .. }) => assert_eq!(context, "layer0"),
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn missing_parameter_is_a_lookup_error() {
    let arch = Mlp::new(vec![2, 2], Activation::Identity).unwrap();
    let s = store_with(&[("layer0.weight", vec![2, 2], vec![0.0; 4])]);
    let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
    assert_eq!(
        apply_network(&s, &arch, &x, None).unwrap_err(),
        AutodiffError::MissingParameter("layer0.bias".into())
    );
}

#[test]
fn dot_product_gradient_is_the_input() {
    // f(w) = w . x with x = (3,)
    let arch = Mlp::new(vec![1, 1], Activation::Identity).unwrap();
    let s = store_with(&[("layer0.weight", vec![1, 1], vec![0.7]), ("layer0.bias", vec![1], vec![0.0])]);
    let mut tape = Tape::new();
    let x = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
    let (_, out) = apply_network(&s, &arch, &x, Some(&mut tape)).unwrap();
    let g = tape.backward(out.unwrap(), &Tensor::new(vec![1, 1], vec![1.0]).unwrap(), &s).unwrap();
    assert_eq!(g.get(&s, "layer0.weight").unwrap().data(), &[3.0]);
    assert_eq!(g.get(&s, "layer0.bias").unwrap().data(), &[1.0]);
}

#[test]
fn constant_network_has_zero_gradients() {
    let arch = Mlp::new(vec![2, 4, 1], Activation::Silu).unwrap();
    let s = arch.init(3);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let loss = tape.mean_row_sq_norm(x);
    let g = tape.backward(loss, &Tensor::scalar(1.0), &s).unwrap();
    assert!(g.flatten().iter().all(|&v| v == 0.0));
    assert_eq!(g.num_scalars(), s.num_scalars());
}

#[test]
fn unused_parameters_get_exact_zeros() {
    let arch = Mlp::new(vec![2, 3], Activation::Identity).unwrap();
    let mut s = arch.init(1);
    s.insert("unused", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap());
    let y = arch.record(&mut tape, &s, x, ParamMode::Trainable).unwrap();
    let loss = tape.mean_row_sq_norm(y);
    let g = tape.backward(loss, &Tensor::scalar(1.0), &s).unwrap();
    assert_eq!(g.get(&s, "unused").unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn record_goes_stale_after_mutation() {
    let arch = Mlp::new(vec![2, 3, 1], Activation::Tanh).unwrap();
    let mut s = arch.init(5);
    let mut tape = Tape::new();
    let x = Tensor::new(vec![1, 2], vec![0.1, 0.2]).unwrap();
    let (_, out) = apply_network(&s, &arch, &x, Some(&mut tape)).unwrap();
    let out = out.unwrap();
    s.get_mut("layer0.bias").unwrap().data_mut()[0] = 1.0;
    let seed = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    assert_eq!(tape.backward(out, &seed, &s).unwrap_err(), AutodiffError::StaleRecord);
    // a clone is a different store
    let mut tape = Tape::new();
    let (_, out) = apply_network(&s, &arch, &x, Some(&mut tape)).unwrap();
    let other = s.clone();
    assert_eq!(
        tape.backward(out.unwrap(), &seed, &other).unwrap_err(),
        AutodiffError::StaleRecord
    );
}

#[test]
fn apply_network_is_deterministic() {
    let arch = Mlp::new(vec![3, 16, 16, 2], Activation::Silu).unwrap();
    let s = arch.init(11);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_matrix(&mut rng, 7, 3);
    let a = arch.forward(&s, &x).unwrap();
    let b = arch.forward(&s, &x).unwrap();
    assert_eq!(a, b);
    let mut tape = Tape::new();
    let (c, _) = apply_network(&s, &arch, &x, Some(&mut tape)).unwrap();
    assert_eq!(a, c);
}

fn two_layer_loss<'a>(arch: &'a Mlp, x: &Tensor) -> impl Fn(&ParameterStore, &mut Tape) -> fade_autodiff::Result<Var> + 'a {
    let x = x.clone();
    move |p, tape| {
        let xi = tape.constant(x.clone());
        let y = arch.record(tape, p, xi, ParamMode::Trainable)?;
        Ok(tape.mean_row_sq_norm(y))
    }
}

#[test]
fn two_layer_network_matches_finite_differences() {
    let arch = Mlp::new(vec![3, 8, 2], Activation::Silu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let s = arch.init(rng.gen());
    let x = random_matrix(&mut rng, 5, 3);
    let report = finite_difference_check(&s, two_layer_loss(&arch, &x), &GradCheckConfig::default()).unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.worst <= 1e-4);
    assert_eq!(report.per_parameter.len(), 4);
}

#[test]
fn quadratic_scalar_is_nearly_exact() {
    let s = store_with(&[("w", vec![1], vec![1.3])]);
    let loss = |p: &ParameterStore, tape: &mut Tape| {
        let w = tape.param(p, 0, ParamMode::Trainable)?;
        Ok(tape.mean_row_sq_norm(w))
    };
    let report = finite_difference_check(&s, loss, &GradCheckConfig::default()).unwrap();
    assert!(report.worst < 1e-8, "{}", report.worst);
}

#[test]
fn zero_tolerance_fails_with_positive_error() {
    let arch = Mlp::new(vec![3, 8, 2], Activation::Silu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = arch.init(1);
    let x = random_matrix(&mut rng, 4, 3);
    let cfg = GradCheckConfig {
        tolerance: 0.0,
        ..GradCheckConfig::default()
    };
    let report = finite_difference_check(&s, two_layer_loss(&arch, &x), &cfg).unwrap();
    assert!(!report.passed);
    assert!(report.worst > 0.0);
}

#[test]
fn non_finite_probe_is_an_evaluation_error() {
    let s = store_with(&[("w", vec![1], vec![1e200])]);
    let loss = |p: &ParameterStore, tape: &mut Tape| {
        let w = tape.param(p, 0, ParamMode::Trainable)?;
        let sq = tape.mean_row_sq_norm(w);
        Ok(tape.mean_row_sq_norm(sq))
    };
    assert!(matches!(
        finite_difference_check(&s, loss, &GradCheckConfig::default()),
        Err(AutodiffError::NonFinite(_))
    ));
}

/// Every tape operation, each checked at 10 random points.
#[test]
fn every_operation_matches_finite_differences() {
    type Builder = fn(&ParameterStore, &mut Tape) -> fade_autodiff::Result<Var>;
    let ops: Vec<(&str, Builder)> = vec![
        ("linear", |p, t| {
            let x = t.param(p, 0, ParamMode::Trainable)?;
            let w = t.param(p, 1, ParamMode::Trainable)?;
            let b = t.param(p, 2, ParamMode::Trainable)?;
            let y = t.linear(x, w, b)?;
            Ok(t.mean_row_sq_norm(y))
        }),
        ("silu", |p, t| act(p, t, Activation::Silu)),
        ("sigmoid", |p, t| act(p, t, Activation::Sigmoid)),
        ("tanh", |p, t| act(p, t, Activation::Tanh)),
        ("lincomb", |p, t| {
            let x = t.param(p, 0, ParamMode::Trainable)?;
            let y = t.param(p, 3, ParamMode::Trainable)?;
            let z = t.lincomb(&[(x, 0.7), (y, -1.9), (x, 0.2)])?;
            let z = t.activation(z, Activation::Tanh);
            Ok(t.mean_row_sq_norm(z))
        }),
        ("concat_cols", |p, t| {
            let x = t.param(p, 0, ParamMode::Trainable)?;
            let y = t.param(p, 3, ParamMode::Trainable)?;
            let z = t.concat_cols(&[x, y, x])?;
            let z = t.activation(z, Activation::Sigmoid);
            Ok(t.mean_row_sq_norm(z))
        }),
        ("concat_rows_slice", |p, t| {
            let x = t.param(p, 0, ParamMode::Trainable)?;
            let y = t.param(p, 3, ParamMode::Trainable)?;
            let z = t.concat_rows(&[y, x])?;
            let z = t.activation(z, Activation::Silu);
            let s = t.slice_rows(z, 2, 6)?;
            Ok(t.mean_row_sq_norm(s))
        }),
        ("binary_log_loss_pos", |p, t| bll(p, t, true)),
        ("binary_log_loss_neg", |p, t| bll(p, t, false)),
        ("softmax_xent", |p, t| {
            let x = t.param(p, 0, ParamMode::Trainable)?;
            let w = t.param(p, 1, ParamMode::Trainable)?;
            let b = t.param(p, 2, ParamMode::Trainable)?;
            let y = t.linear(x, w, b)?;
            t.softmax_xent(y, 1, 3, &[0, 2, 1, 1])
        }),
    ];
    fn act(p: &ParameterStore, t: &mut Tape, kind: Activation) -> fade_autodiff::Result<Var> {
        let x = t.param(p, 0, ParamMode::Trainable)?;
        let y = t.activation(x, kind);
        let z = t.lincomb(&[(y, 1.0), (x, 0.3)])?;
        Ok(t.mean_row_sq_norm(z))
    }
    fn bll(p: &ParameterStore, t: &mut Tape, positive: bool) -> fade_autodiff::Result<Var> {
        let x = t.param(p, 0, ParamMode::Trainable)?;
        let w = t.param(p, 1, ParamMode::Trainable)?;
        let b = t.param(p, 2, ParamMode::Trainable)?;
        let y = t.linear(x, w, b)?;
        t.binary_log_loss(y, 2, positive, 1e-7)
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (name, build) in ops {
        for point in 0..10 {
            let mut s = ParameterStore::new();
            s.insert("x", random_matrix(&mut rng, 4, 3)).unwrap();
            s.insert("w", random_matrix(&mut rng, 3, 4)).unwrap();
            s.insert("b", Tensor::new(vec![4], (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
                .unwrap();
            s.insert("y", random_matrix(&mut rng, 4, 3)).unwrap();
            let report = finite_difference_check(&s, build, &GradCheckConfig::default()).unwrap();
            assert!(report.passed, "{name} point {point}: {report:?}");
        }
    }
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut s = store_with(&[("w", vec![1], vec![1.0])]);
    let mut g = s.zero_gradients();
    let mut tape = Tape::new();
    let w = tape.param(&s, 0, ParamMode::Trainable).unwrap();
    let l = tape.lincomb(&[(w, 1.0)]).unwrap();
    g.accumulate(&tape.backward(l, &Tensor::new(vec![1], vec![1.0]).unwrap(), &s).unwrap());
    let mut state = AdamState::new(1);
    masked_adam_step(&mut s, &g, None, &mut state, &AdamConfig::with_lr(0.1)).unwrap();
    let w = s.get("w").unwrap().data()[0];
    assert!((w - 0.9).abs() < 1e-6, "{w}");
}

#[test]
fn adam_with_zero_gradients_is_a_fixed_point() {
    let arch = Mlp::new(vec![2, 4, 2], Activation::Silu).unwrap();
    let mut s = arch.init(9);
    let before = s.flatten();
    let g = s.zero_gradients();
    let mut state = AdamState::new(s.num_scalars());
    for _ in 0..3 {
        masked_adam_step(&mut s, &g, None, &mut state, &AdamConfig::with_lr(0.01)).unwrap();
    }
    assert_eq!(before, s.flatten());
}

#[test]
fn adam_mask_length_must_match() {
    let arch = Mlp::new(vec![2, 2], Activation::Silu).unwrap();
    let mut s = arch.init(9);
    let g = s.zero_gradients();
    let mut state = AdamState::new(s.num_scalars());
    let err = masked_adam_step(&mut s, &g, Some(&[true; 3]), &mut state, &AdamConfig::with_lr(0.01)).unwrap_err();
    assert_eq!(err, AutodiffError::MaskAlignment { expected: 6, got: 3 });
}

fn random_gradients(arch: &Mlp, s: &ParameterStore, seed: u64) -> (fade_autodiff::Gradients, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_matrix(&mut rng, 3, arch.input_width());
    let mut tape = Tape::new();
    let loss = two_layer_loss(arch, &x)(s, &mut tape).unwrap();
    let v = tape.value(loss).item();
    (tape.backward(loss, &Tensor::scalar(1.0), s).unwrap(), v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn excluded_scalars_are_bit_identical(seed in any::<u64>(), mask_bits in proptest::collection::vec(any::<bool>(), 32)) {
        let arch = Mlp::new(vec![2, 6, 2], Activation::Silu).unwrap();
        let mut s = arch.init(seed);
        let before = s.flatten();
        let (g, _) = random_gradients(&arch, &s, seed ^ 1);
        let mut state = AdamState::new(s.num_scalars());
        for _ in 0..4 {
            masked_adam_step(&mut s, &g, Some(&mask_bits), &mut state, &AdamConfig::with_lr(0.05)).unwrap();
        }
        let after = s.flatten();
        for i in 0..before.len() {
            if !mask_bits[i] {
                prop_assert_eq!(before[i].to_bits(), after[i].to_bits());
            }
        }
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients(seed in any::<u64>()) {
        let arch = Mlp::new(vec![3, 5, 2], Activation::Silu).unwrap();
        let s = arch.init(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
        let xa = random_matrix(&mut rng, 3, 3);
        let xb = random_matrix(&mut rng, 2, 3);
        let grad_of = |build: &dyn Fn(&mut Tape) -> Var| {
            let mut tape = Tape::new();
            let l = build(&mut tape);
            tape.backward(l, &Tensor::scalar(1.0), &s).unwrap().flatten()
        };
        let la = two_layer_loss(&arch, &xa);
        let lb = two_layer_loss(&arch, &xb);
        let ga = grad_of(&|t| la(&s, t).unwrap());
        let gb = grad_of(&|t| lb(&s, t).unwrap());
        let gsum = grad_of(&|t| {
            let a = la(&s, t).unwrap();
            let b = lb(&s, t).unwrap();
            t.lincomb(&[(a, 1.0), (b, 1.0)]).unwrap()
        });
        for i in 0..ga.len() {
            let expect = ga[i] + gb[i];
            prop_assert!((gsum[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }
}
