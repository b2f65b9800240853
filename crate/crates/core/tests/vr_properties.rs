use nalgebra::{DMatrix, DVector};
use pearl_core::env::Environment;
use pearl_core::seed::SeedTree;
use pearl_core::vr::{make_profiles, LearnerState, Mode, ProfileMDP, QuizReward, VrAction, VrEnv, STATE_COUNT};

const ROLLOUTS: usize = 10_000;

/// Fraction of lectures starting free of vertigo that show vertigo within
/// the first two 3D stages.
fn vertigo_rate(profile: &ProfileMDP, seed: u64) -> f64 {
    let mut env = VrEnv::new(profile.clone(), QuizReward::default(), SeedTree::new(seed).stream("mc")).unwrap();
    let (mut hits, mut runs) = (0, 0);
    while runs < ROLLOUTS {
        env.reset();
        if env.state().vl == 0 {
            continue;
        }
        runs += 1;
        env.step(VrAction::EnableVr.index()).unwrap();
        let first = env.state().vl == 0;
        env.step(VrAction::NoChange.index()).unwrap();
        assert_eq!(env.mode(), Mode::ThreeD);
        if first || env.state().vl == 0 {
            hits += 1;
        }
    }
    hits as f64 / ROLLOUTS as f64
}

#[test]
fn low_tolerance_gets_vertigo_more_often() {
    for seed in [1, 2, 3] {
        let [p1, p2, p3] = make_profiles(seed).unwrap();
        let (r1, r2, r3) = (vertigo_rate(&p1, seed), vertigo_rate(&p2, seed), vertigo_rate(&p3, seed));
        assert!(r3 >= r2 && r2 >= r1, "seed {seed}: {r1} {r2} {r3}");
        assert!(r3 > r1 + 0.1);
    }
}

#[test]
fn transitions_are_stochastic_and_sampled_faithfully() {
    let [p1, ..] = make_profiles(4).unwrap();
    let mut env = VrEnv::new(p1.clone(), QuizReward::default(), SeedTree::new(4).stream("freq")).unwrap();
    let row = *p1.row(7, VrAction::NoChange.index(), Mode::TwoD.index());
    assert!(row.iter().filter(|p| **p > 0.0).count() >= 2);
    let mut counts = [0usize; STATE_COUNT];
    let mut runs = 0;
    while runs < ROLLOUTS {
        env.reset();
        if env.state().index() != 7 {
            continue;
        }
        runs += 1;
        env.step(VrAction::NoChange.index()).unwrap();
        counts[env.state().index()] += 1;
    }
    for (s, &c) in counts.iter().enumerate() {
        let p = row[s];
        let sigma = (p * (1.0 - p) / ROLLOUTS as f64).sqrt();
        let f = c as f64 / ROLLOUTS as f64;
        assert!((f - p).abs() <= 4.0 * sigma + 1e-12, "S{}: {f} vs {p}", s + 1);
    }
}

#[test]
fn best_state_scores_above_worst() {
    let quiz = QuizReward::default();
    let (best, worst) = (LearnerState::new(1, 1, 1), LearnerState::new(0, 0, 0));
    assert!(quiz.expected(best) > quiz.expected(worst));
    let mut rng = SeedTree::new(5).stream("quiz");
    let mut mean = |s| (0..ROLLOUTS).map(|_| quiz.sample(s, &mut rng)).sum::<f64>() / ROLLOUTS as f64;
    assert!(mean(best) > mean(worst));
}

fn stationary(p: &[[f64; STATE_COUNT]; STATE_COUNT]) -> DVector<f64> {
    // Solve π(P − I) = 0 with Σπ = 1 by replacing one balance equation.
    let mut a = DMatrix::from_fn(STATE_COUNT, STATE_COUNT, |i, j| p[j][i] - if i == j { 1.0 } else { 0.0 });
    let mut b = DVector::zeros(STATE_COUNT);
    for j in 0..STATE_COUNT {
        a[(STATE_COUNT - 1, j)] = 1.0;
    }
    b[STATE_COUNT - 1] = 1.0;
    a.lu().solve(&b).expect("irreducible chain")
}

#[test]
fn always_3d_stationary_mass_on_vertigo_ordered_by_tolerance() {
    for seed in [1, 7] {
        let [p1, p2, p3] = make_profiles(seed).unwrap();
        let vertigo_mass = |m: &ProfileMDP| {
            let pi = stationary(&m.chain(VrAction::NoChange, Mode::ThreeD));
            assert!((pi.sum() - 1.0).abs() < 1e-9 && pi.iter().all(|x| *x > -1e-12));
            (0..STATE_COUNT).filter(|s| s & 1 == 0).map(|s| pi[s]).sum::<f64>()
        };
        let (m1, m2, m3) = (vertigo_mass(&p1), vertigo_mass(&p2), vertigo_mass(&p3));
        assert!(m3 > m2 && m2 > m1, "seed {seed}: {m1} {m2} {m3}");
    }
}
