mod common;

use common::{analytic_mi, brute_force_mi, random_joint, sample_joint};
use pearl_core::privacy::{mutual_information, mutual_information_with, Estimator};
use pearl_core::seed::SeedTree;
use proptest::prelude::*;
use rand::Rng as _;

#[test]
fn plug_in_matches_brute_force_on_random_windows() {
    let mut rng = SeedTree::new(101).stream("mi-windows");
    for _ in 0..1000 {
        let n = rng.random_range(1..400);
        let ns = rng.random_range(1..30);
        let na = rng.random_range(1..8);
        let window: Vec<(usize, usize)> = (0..n).map(|_| (rng.random_range(0..ns), rng.random_range(0..na))).collect();
        let got = mutual_information(&window);
        let want = brute_force_mi(&window);
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

#[test]
fn large_windows_approach_analytic_mi() {
    let mut rng = SeedTree::new(102).stream("mi-analytic");
    for trial in 0..20 {
        let joint = random_joint(rng.random_range(2..9), rng.random_range(2..6), &mut rng);
        let window = sample_joint(&joint, 10_000, &mut rng);
        let got = mutual_information(&window);
        let want = analytic_mi(&joint);
        assert!((got - want).abs() < 0.05, "trial {trial}: {got} vs {want}");
    }
}

#[test]
fn deterministic_map_leaks_source_entropy() {
    // A uniform state over 8 values mapped onto 4 actions leaks log2(4) bits.
    let window: Vec<(usize, usize)> = (0..8000).map(|t| (t % 8, (t % 8) / 2)).collect();
    assert!((mutual_information(&window) - 2.0).abs() < 1e-12);
}

#[test]
fn miller_madow_reduces_small_sample_bias() {
    let mut rng = SeedTree::new(103).stream("mm");
    let independent: Vec<Vec<f64>> = vec![vec![1.0 / 24.0; 4]; 6];
    let (mut plug, mut mm) = (0.0, 0.0);
    for _ in 0..200 {
        let w = sample_joint(&independent, 168, &mut rng);
        plug += mutual_information(&w);
        mm += mutual_information_with(&w, Estimator::MillerMadow);
    }
    assert!(mm < plug);
}

fn windows() -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0usize..12, 0usize..6), 1..300)
}

proptest! {
    #[test]
    fn bounded_by_marginal_entropies(w in windows()) {
        let mi = mutual_information(&w);
        let n = w.len() as f64;
        let entropy = |idx: fn(&(usize, usize)) -> usize| {
            let mut c = std::collections::HashMap::new();
            for p in &w {
                *c.entry(idx(p)).or_insert(0usize) += 1;
            }
            c.values().map(|&k| { let p = k as f64 / n; -p * p.log2() }).sum::<f64>()
        };
        prop_assert!(mi >= 0.0);
        prop_assert!(mi <= entropy(|p| p.0) + 1e-9);
        prop_assert!(mi <= entropy(|p| p.1) + 1e-9);
    }

    #[test]
    fn invariant_under_relabelling(w in windows(), shift in 1usize..50) {
        let relabelled: Vec<(usize, usize)> = w.iter().map(|&(s, a)| (s * 7 + shift, 5 - a)).collect();
        prop_assert!((mutual_information(&w) - mutual_information(&relabelled)).abs() < 1e-9);
    }

    #[test]
    fn symmetric(w in windows()) {
        let swapped: Vec<(usize, usize)> = w.iter().map(|&(s, a)| (a, s)).collect();
        prop_assert!((mutual_information(&w) - mutual_information(&swapped)).abs() < 1e-9);
    }

    #[test]
    fn order_of_samples_is_irrelevant(mut w in windows()) {
        let before = mutual_information(&w);
        w.reverse();
        prop_assert!((before - mutual_information(&w)).abs() < 1e-12);
    }
}
