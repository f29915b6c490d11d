mod common;

use common::{
    exit_counts, oracle_cost, random_costs, rng, solve_budget_against_grid, synthetic_profile, three_way_distribution_error,
};
use msdnet::exit_policy::{
    calibrate_thresholds, exit_distribution, expected_cost, replay_exits, solve_budget, target_exit_counts, Clamp,
    DEFAULT_TOLERANCE, NEVER_EXIT, Q_MIN,
};
use proptest::prelude::*;

#[test]
fn three_classifier_distribution() {
    assert!(three_way_distribution_error() < 1e-9);
    assert_eq!(exit_distribution(1.0, 4).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn solve_budget_matches_grid_oracle() {
    solve_budget_against_grid(50, 31).unwrap();
}

#[test]
fn clamps_at_both_ends() {
    let costs = [10.0, 20.0, 60.0];
    let low = solve_budget(&costs, 4, 40.0, DEFAULT_TOLERANCE).unwrap();
    assert_eq!((low.q, low.clamp), (1.0, Some(Clamp::AllExitFirst)));
    let low = solve_budget(&costs, 4, 1.0, DEFAULT_TOLERANCE).unwrap();
    assert_eq!(low.clamp, Some(Clamp::AllExitFirst));
    let high = solve_budget(&costs, 4, 4.0 * 30.0, DEFAULT_TOLERANCE).unwrap();
    assert_eq!((high.q, high.clamp), (Q_MIN, Some(Clamp::MaxDepth)));
    let high = solve_budget(&costs, 4, 1e9, DEFAULT_TOLERANCE).unwrap();
    assert_eq!(high.clamp, Some(Clamp::MaxDepth));
    assert!(solve_budget(&costs, 4, 0.0, DEFAULT_TOLERANCE).is_err());
    assert!(solve_budget(&[5.0, 3.0], 4, 20.0, DEFAULT_TOLERANCE).is_err());
}

#[test]
fn calibration_replays_exact_counts() {
    let n = 1000;
    for (seed, q) in [(1, 0.3), (2, 0.05), (3, 0.7), (4, 1.0)] {
        let profile = synthetic_profile(n, 4, seed, None);
        let qk = exit_distribution(q, 4).unwrap();
        let cal = calibrate_thresholds(&profile, &qk, n).unwrap();
        let replay = exit_counts(&replay_exits(&profile, &cal.thresholds), 4);
        assert_eq!(replay, cal.target_counts, "q = {q}");
        assert_eq!(cal.target_counts, target_exit_counts(&qk, n));
        assert_eq!(cal.target_counts.iter().sum::<usize>(), n);
        assert_eq!(*cal.thresholds.last().unwrap(), 0.0);
    }
}

#[test]
fn ties_exit_early() {
    let n = 1000;
    let profile = synthetic_profile(n, 3, 9, Some(20.0));
    let qk = exit_distribution(0.4, 3).unwrap();
    let cal = calibrate_thresholds(&profile, &qk, n).unwrap();
    let replay = exit_counts(&replay_exits(&profile, &cal.thresholds), 3);
    assert_eq!(replay, cal.exit_counts);
    // every sample tied at a threshold leaves there, so early heads can only overshoot
    assert!(replay[0] >= cal.target_counts[0]);
    let theta = cal.thresholds[0];
    let at_threshold = (0..n).filter(|&i| profile.confidence(i, 0) == theta).count();
    assert!(at_threshold > 1);
}

#[test]
fn zero_target_never_exits() {
    let profile = synthetic_profile(10, 3, 5, None);
    let cal = calibrate_thresholds(&profile, &[0.0, 0.0, 1.0], 10).unwrap();
    assert_eq!(&cal.thresholds[..2], &[NEVER_EXIT, NEVER_EXIT]);
    assert_eq!(exit_counts(&replay_exits(&profile, &cal.thresholds), 3), vec![0, 0, 10]);
}

proptest! {
    #[test]
    fn distribution_sums_to_one(q in 1e-6f64..=1.0, k in 1usize..12) {
        let qk = exit_distribution(q, k).unwrap();
        prop_assert!((qk.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(qk.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn expected_cost_is_monotone(a in 1e-4f64..1.0, b in 1e-4f64..1.0, seed in 0u64..1000) {
        let mut r = rng(seed);
        let costs = random_costs(&mut r, 5);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(expected_cost(lo, &costs, 7).unwrap() >= expected_cost(hi, &costs, 7).unwrap() - 1e-6);
        prop_assert!((expected_cost(a, &costs, 7).unwrap() - oracle_cost(a, &costs, 7)).abs() < 1e-6);
    }

    #[test]
    fn solution_cost_never_escapes_range(frac in 0.0f64..1.5, seed in 0u64..1000) {
        let mut r = rng(seed);
        let costs = random_costs(&mut r, 4);
        let budget = 10.0 * (costs[0] * 0.5 + frac * costs[3]);
        let sol = solve_budget(&costs, 10, budget, DEFAULT_TOLERANCE).unwrap();
        let cost = expected_cost(sol.q, &costs, 10).unwrap();
        prop_assert!(cost >= 10.0 * costs[0] - 1e-6);
        if sol.clamp.is_none() {
            prop_assert!((cost - budget).abs() <= DEFAULT_TOLERANCE * budget);
        }
    }

    #[test]
    fn replay_matches_calibration(seed in 0u64..200, q in 0.01f64..1.0, n in 1usize..300) {
        let profile = synthetic_profile(n, 3, seed, Some(10.0));
        let qk = exit_distribution(q, 3).unwrap();
        let cal = calibrate_thresholds(&profile, &qk, n).unwrap();
        prop_assert_eq!(exit_counts(&replay_exits(&profile, &cal.thresholds), 3), cal.exit_counts);
    }
}
