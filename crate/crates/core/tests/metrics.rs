use fade_autodiff::Tensor;
use fade_core::adversary::Discriminator;
use fade_core::diffusion::{DenoiserModel, DenoiserSpec, NoiseSchedule};
use fade_core::metrics::*;
use fade_core::world::{sample_world, World};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quick_probe(world: &World) -> ProbeClassifier {
    let cfg = ProbeConfig {
        samples_per_label: 400,
        steps: 300,
        batch: 64,
        lr: 3e-3,
    };
    train_probe(world, &cfg, 7).unwrap()
}

/// Hand evaluation of the normalized fidelity score.
fn f_oracle(proxy: f64, adh: f64, rp: f64, ra: f64) -> f64 {
    let fid_term = if proxy >= 2.0 * rp { 0.0 } else { (2.0 * rp - proxy) / rp };
    let raw = (adh / ra + fid_term) / 2.0;
    if raw > 1.0 {
        1.0
    } else if raw < 0.0 {
        0.0
    } else {
        raw
    }
}

#[test]
fn fidelity_and_harmonic_mean_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut clamped_low = 0;
    let mut clamped_high = 0;
    for i in 0..20 {
        let rp = rng.gen_range(0.05..1.0);
        let ra = rng.gen_range(0.5..1.0);
        // Alternate regimes so every branch of the formula is hit.
        let proxy = match i % 4 {
            0 => rng.gen_range(2.0 * rp..5.0 * rp),
            1 => rng.gen_range(0.0..0.5 * rp),
            _ => rng.gen_range(0.0..2.0 * rp),
        };
        let adh = rng.gen_range(0.0..1.0);
        let f = fidelity_f(proxy, adh, rp, ra).unwrap();
        let want = f_oracle(proxy, adh, rp, ra);
        assert!((f - want).abs() < 1e-12, "{f} vs {want}");
        if proxy >= 2.0 * rp {
            clamped_low += 1;
        }
        if f == 1.0 {
            clamped_high += 1;
        }
        let e = rng.gen_range(0.0..1.0);
        let h = harmonic_mean(e, f);
        assert!((h - 2.0 * e * f / (e + f)).abs() < 1e-12);
    }
    assert!(clamped_low > 0);
    assert!(clamped_high > 0);
}

#[test]
fn harmonic_mean_examples() {
    assert!((harmonic_mean(0.9, 0.9) - 0.9).abs() < 1e-15);
    assert_eq!(harmonic_mean(1.0, 0.0), 0.0);
    assert!((harmonic_mean(0.9, 0.8) - 1.44 / 1.7).abs() < 1e-15);
    assert!((harmonic_mean(0.9, 0.8) - 0.8471).abs() < 1e-4);
    assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
}

#[test]
fn fidelity_rejects_bad_reference() {
    assert!(fidelity_f(0.1, 0.9, 0.0, 1.0).is_err());
    assert!(fidelity_f(0.1, 0.9, 0.1, 0.0).is_err());
    assert!(fidelity_f(f64::NAN, 0.9, 0.1, 1.0).is_err());
}

fn inputs(acc: f64) -> MetricInputs {
    MetricInputs {
        concept_accuracy: acc,
        fidelity_proxy: 0.12,
        adherence: 0.97,
        adherence_vacuous: false,
        reference_concept_accuracy: 1.0,
        reference_fidelity_proxy: 0.1,
        reference_adherence: 1.0,
        concept_mi_nats: 0.01,
        reference_concept_mi_nats: 0.69,
    }
}

#[test]
fn report_assembly() {
    let r = emit_report(&inputs(0.0)).unwrap();
    assert_eq!(r.erasure_efficacy, 1.0);
    assert_eq!(r.harmonic_mean, harmonic_mean(r.erasure_efficacy, r.fidelity));
    let json = serde_json::to_string(&r).unwrap();
    let back: MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
    back.check().unwrap();

    let mut bad = r;
    bad.erasure_efficacy = 0.5;
    assert!(bad.check().is_err());
    let mut bad = r;
    bad.harmonic_mean += 1e-9;
    assert!(bad.check().is_err());
    assert!(emit_report(&inputs(1.5)).is_err());
}

#[test]
fn frechet_of_matching_samples_is_near_zero() {
    let world = World::default_world();
    let l = &world.all_labels()[1];
    let a = sample_world(&world, l, 20_000, 1).unwrap();
    let b = sample_world(&world, l, 20_000, 2).unwrap();
    assert!(frechet_proxy(&a, &b).unwrap() < 0.01);
    // A unit mean shift costs exactly its squared length in the limit.
    let shifted: Vec<f64> = b.data().chunks(2).flat_map(|r| [r[0] + 1.0, r[1]]).collect();
    let shifted = Tensor::new(vec![20_000, 2], shifted).unwrap();
    assert!((frechet_proxy(&a, &shifted).unwrap() - 1.0).abs() < 0.05);
}

#[test]
fn frechet_needs_enough_samples() {
    let a = Tensor::zeros(&[1, 2]);
    let b = Tensor::zeros(&[10, 2]);
    assert!(frechet_proxy(&a, &b).is_err());
}

#[test]
fn probe_separates_ground_truth() {
    let world = World::default_world();
    let probe = train_probe(&world, &ProbeConfig::default(), 3).unwrap();
    assert!(probe.held_out_accuracy(&world, 1000, 11).unwrap() >= 0.95);
}

#[test]
fn concept_accuracy_is_permutation_invariant() {
    let world = World::default_world();
    let probe = quick_probe(&world);
    let mut rows: Vec<Vec<f64>> = (0..300)
        .map(|i| vec![(i as f64 / 300.0 - 0.5) * 12.0, (i % 7) as f64 * 0.5])
        .collect();
    let to_tensor = |rows: &[Vec<f64>]| Tensor::new(vec![rows.len(), 2], rows.concat()).unwrap();
    let before = concept_accuracy(&probe, &to_tensor(&rows)).unwrap();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(concept_accuracy(&probe, &to_tensor(&rows)).unwrap(), before);
}

#[test]
fn reports_ignore_the_adversary() {
    let world = World::default_world();
    let schedule = NoiseSchedule::linear(8, 1e-4, 0.3).unwrap();
    let spec = DenoiserSpec {
        hidden: vec![16, 16],
        ..DenoiserSpec::for_world(&world, 8)
    };
    let model = DenoiserModel::new(spec, 1).unwrap();
    let probe = quick_probe(&world);
    let cfg = EvalConfig {
        samples_per_prompt: 120,
        reference_samples: 200,
        ..EvalConfig::default()
    };
    let first = evaluate_model(&model, &model, &world, &schedule, &probe, &cfg).unwrap();
    // Scramble an unrelated discriminator: nothing in scoring reads it.
    let mut d = Discriminator::new(2, 1, 1).unwrap();
    let noise: Vec<f64> = (0..d.params.num_scalars()).map(|i| (i as f64).sin()).collect();
    d.params.set_flat(&noise).unwrap();
    let second = evaluate_model(&model, &model, &world, &schedule, &probe, &cfg).unwrap();
    assert_eq!(first, second);
}

#[test]
fn adherence_matches_generating_context() {
    let world = World::default_world();
    let probe = quick_probe(&world);
    let labels = world.all_labels();
    let mut data = Vec::new();
    let mut prompts = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        data.extend(sample_world(&world, l, 100, i as u64).unwrap().data().to_vec());
        prompts.extend(std::iter::repeat(l.clone()).take(100));
    }
    let x = Tensor::new(vec![prompts.len(), 2], data).unwrap();
    let a = adherence_score(&probe, &x, &prompts).unwrap();
    assert!(!a.vacuous);
    assert!(a.score > 0.95, "{}", a.score);
    // Swap scene labels: agreement collapses.
    let scene = world.context_attributes()[0];
    let swapped: Vec<_> = prompts
        .iter()
        .map(|p| {
            let mut v = p.values.clone();
            v[scene] = 1 - v[scene];
            world.label(v).unwrap()
        })
        .collect();
    assert!(adherence_score(&probe, &x, &swapped).unwrap().score < 0.05);
}

proptest! {
    #[test]
    fn harmonic_mean_bounds(e in 0.0f64..=1.0, f in 0.0f64..=1.0) {
        let h = harmonic_mean(e, f);
        prop_assert!(h <= 2.0 * e.min(f) + 1e-15);
        prop_assert!(h <= (e + f) / 2.0 + 1e-15);
        prop_assert!(h >= 0.0);
    }

    #[test]
    fn frechet_symmetric_and_nonnegative(
        a in prop::collection::vec(-5.0f64..5.0, 40),
        b in prop::collection::vec(-5.0f64..5.0, 60),
    ) {
        let ta = Tensor::new(vec![20, 2], a).unwrap();
        let tb = Tensor::new(vec![30, 2], b).unwrap();
        let ab = frechet_proxy(&ta, &tb).unwrap();
        let ba = frechet_proxy(&tb, &ta).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab));
        prop_assert!(frechet_proxy(&ta, &ta).unwrap() < 1e-6);
    }

    #[test]
    fn fidelity_stays_in_unit_interval(
        proxy in 0.0f64..10.0, adh in 0.0f64..=1.0, rp in 0.01f64..2.0, ra in 0.01f64..=1.0,
    ) {
        let f = fidelity_f(proxy, adh, rp, ra).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert!((f - f_oracle(proxy, adh, rp, ra)).abs() < 1e-12);
    }
}
