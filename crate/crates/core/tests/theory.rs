use std::f64::consts::LN_2;

use fade_autodiff::Tensor;
use fade_core::theory::*;
use fade_core::world::{sample_world, World};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Normalized vector from positive weights, with the last entry absorbing
/// rounding so the sum is exactly representable as one within tolerance.
fn normalize(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

fn random_pair(rng: &mut ChaCha8Rng) -> DiscretePairedDistribution {
    let m = rng.gen_range(2..=16);
    // Some pairs are exactly equal so both sides of the equivalence get exercised.
    let p1 = normalize(&(0..m).map(|_| -rng.gen::<f64>().ln()).collect::<Vec<_>>());
    let p0 = if rng.gen_bool(0.1) {
        p1.clone()
    } else {
        normalize(&(0..m).map(|_| -rng.gen::<f64>().ln()).collect::<Vec<_>>())
    };
    DiscretePairedDistribution::balanced(p1, p0).unwrap()
}

// Independent oracle formulas written out directly.
fn mi_oracle(p1: &[f64], p0: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&a, &b) in p1.iter().zip(p0) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            s += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            s += 0.5 * b * (b / m).ln();
        }
    }
    s
}

fn tv_oracle(p1: &[f64], p0: &[f64]) -> f64 {
    0.5 * p1.iter().zip(p0).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[test]
fn thousand_pair_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let d = random_pair(&mut rng);
        let tv = total_variation(&d);
        let mi = mutual_information(&d);
        assert!((tv - tv_oracle(d.p1(), d.p0())).abs() < 1e-14);
        assert!((mi - mi_oracle(d.p1(), d.p0())).abs() < 1e-12);

        let acc = accuracy_tv_bound(&d).unwrap();
        assert!(acc.identity_residual <= 1e-12);

        let zero_mi = mi.abs() <= 1e-9;
        let zero_tv = tv <= 1e-9;
        assert_eq!(zero_mi, zero_tv, "mi {mi} tv {tv}");

        let rem = optimal_losses(&d).unwrap().removal;
        assert!(rem >= LN_2 - 1e-9);
        assert_eq!((rem - LN_2).abs() <= 1e-9, zero_tv, "rem {rem} tv {tv}");

        assert!(verify_theorem_equilibrium(&d, 0.1).unwrap().passed);
    }
}

#[test]
fn accuracy_examples() {
    let d = DiscretePairedDistribution::balanced(vec![0.8, 0.2], vec![0.2, 0.8]).unwrap();
    assert!((accuracy_tv_bound(&d).unwrap().best_accuracy - 0.8).abs() < 1e-15);
    let same = DiscretePairedDistribution::balanced(vec![0.3, 0.7], vec![0.3, 0.7]).unwrap();
    assert_eq!(accuracy_tv_bound(&same).unwrap().best_accuracy, 0.5);
    let tenth = DiscretePairedDistribution::balanced(vec![0.55, 0.45], vec![0.45, 0.55]).unwrap();
    assert!((accuracy_tv_bound(&tenth).unwrap().best_accuracy - 0.55).abs() < 1e-15);
}

#[test]
fn accuracy_point_fifty_five_caps_tv_at_a_tenth() {
    assert_eq!(tv_ceiling_from_accuracy(0.55), 2.0 * 0.55 - 1.0);
    assert!((tv_ceiling_from_accuracy(0.55) - 0.1).abs() < 1e-15);
    assert_eq!(tv_ceiling_from_accuracy(0.5), 0.0);
    assert_eq!(tv_ceiling_from_accuracy(0.4), 0.0);
}

#[test]
fn equal_pair_equilibrium_values() {
    let d = DiscretePairedDistribution::balanced(vec![0.25; 4], vec![0.25; 4]).unwrap();
    assert!(bayes_discriminator(&d).unwrap().iter().all(|&q| q == 0.5));
    let l = optimal_losses(&d).unwrap();
    assert!((l.discriminator - 2.0 * LN_2).abs() < 1e-12);
    assert!((l.removal - LN_2).abs() < 1e-12);
    assert_eq!(mutual_information(&d), 0.0);
}

#[test]
fn empirical_mi_same_source_is_small() {
    let world = World::default_world();
    let label = world.all_labels()[0].clone();
    let a = sample_world(&world, &label, 10_000, 1).unwrap();
    let b = sample_world(&world, &label, 10_000, 2).unwrap();
    let mi = empirical_concept_mi(&a, &b, &GridSpec::for_world(&world)).unwrap();
    assert!(mi < 0.02, "{mi}");
}

#[test]
fn empirical_mi_of_concept_components_is_large() {
    let world = World::default_world();
    let ci = world.concept_index();
    let draw = |flag: usize, seed: u64| {
        let mut data = Vec::new();
        for (k, l) in world.all_labels().iter().filter(|l| l.values[ci] == flag).enumerate() {
            data.extend(sample_world(&world, l, 2500, seed + k as u64).unwrap().data().to_vec());
        }
        Tensor::new(vec![data.len() / 2, 2], data).unwrap()
    };
    let mi = empirical_concept_mi(&draw(1, 10), &draw(0, 20), &GridSpec::for_world(&world)).unwrap();
    assert!(mi > 0.5, "{mi}");
}

#[test]
fn identical_samples_give_zero_mi() {
    let world = World::default_world();
    let x = sample_world(&world, &world.all_labels()[3], 500, 4).unwrap();
    let mi = empirical_concept_mi(&x, &x, &GridSpec::for_world(&world)).unwrap();
    assert!(mi.abs() < 1e-12, "{mi}");
}

#[test]
fn empirical_mi_guards() {
    let grid = GridSpec {
        lower: vec![0.0, 0.0],
        upper: vec![1.0, 1.0],
        bins: 4,
    };
    let small = Tensor::zeros(&[50, 2]);
    let ok = Tensor::zeros(&[200, 2]);
    assert!(empirical_concept_mi(&small, &ok, &grid).is_err());
    assert!(empirical_concept_mi(&ok, &Tensor::zeros(&[200, 3]), &grid).is_err());
    let bad = GridSpec { bins: 0, ..grid };
    assert!(empirical_concept_mi(&ok, &ok, &bad).is_err());
}

#[test]
fn unbalanced_prior_uses_class_frequencies() {
    let x1 = Tensor::zeros(&[300, 1]);
    let x0 = Tensor::new(vec![100, 1], vec![0.9; 100]).unwrap();
    let grid = GridSpec {
        lower: vec![0.0],
        upper: vec![1.0],
        bins: 2,
    };
    let d = binned_distribution(&x1, &x0, &grid).unwrap();
    assert!((d.prior() - 0.75).abs() < 1e-15);
    // Fully separated classes: MI equals the prior entropy.
    let h = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
    assert!((mutual_information(&d) - h).abs() < 1e-6);
}

fn pair_strategy() -> impl Strategy<Value = DiscretePairedDistribution> {
    (2usize..=16)
        .prop_flat_map(|m| (prop::collection::vec(0.01f64..1.0, m), prop::collection::vec(0.01f64..1.0, m)))
        .prop_map(|(a, b)| DiscretePairedDistribution::balanced(normalize(&a), normalize(&b)).unwrap())
}

proptest! {
    #[test]
    fn merging_bins_never_increases_mi(d in pair_strategy(), i in 0usize..16, j in 0usize..16) {
        let m = d.support();
        let (i, j) = (i % m, j % m);
        prop_assume!(i != j);
        let merged = d.merge_bins(i, j).unwrap();
        prop_assert!(mutual_information(&merged) <= mutual_information(&d) + 1e-12);
    }

    #[test]
    fn every_event_gap_is_bounded_by_tv(d in pair_strategy(), mask in prop::collection::vec(any::<bool>(), 16)) {
        let event = &mask[..d.support()];
        let (a, b) = d.event_probabilities(event);
        prop_assert!((a - b).abs() <= total_variation(&d) + 1e-12);
    }

    #[test]
    fn equilibrium_report_always_passes(d in pair_strategy(), tol in 0.0f64..0.5) {
        let r = verify_theorem_equilibrium(&d, tol).unwrap();
        prop_assert!(r.passed, "{:?}", r.checks);
        prop_assert!(r.mutual_information >= -1e-15);
    }

    #[test]
    fn bayes_discriminator_is_likelihood_ratio(d in pair_strategy()) {
        for ((q, a), b) in bayes_discriminator(&d).unwrap().iter().zip(d.p1()).zip(d.p0()) {
            prop_assert!((q - a / (a + b)).abs() < 1e-15);
        }
    }
}
