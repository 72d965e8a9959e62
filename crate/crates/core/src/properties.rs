//! Randomized invariants across modules.

use proptest::prelude::*;

use crate::baselines::{estimation_budget, ConfidenceSet};
use crate::env::{RewardOracle, RidgeEnvironment};
use crate::geometry::{combine_scaled, dot, norm, sample_complement, sample_sphere, DirectionBasis, SimRng};
use crate::harness::{median, trial_seed, wilson_interval};
use crate::learning::{explore_actions, project_feasible, RegressionData};
use crate::linkfn::{LinkFunction, Mirror};
use crate::theory::{burnin_integral_lb, burnin_integral_ub, lb_epsilon_terms};

fn link_strategy() -> impl Strategy<Value = LinkFunction> {
    prop_oneof![
        Just(LinkFunction::identity()),
        Just(LinkFunction::cubic()),
        (0.5f64..4.0).prop_map(|p| LinkFunction::abs_power(p).unwrap()),
        (1u32..6).prop_map(|p| LinkFunction::signed_power(p).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sphere_samples_are_unit(seed in any::<u64>(), d in 2usize..300) {
        let v = sample_sphere(&mut SimRng::new(seed), d);
        prop_assert!((norm(&v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn complement_samples_stay_orthogonal(seed in any::<u64>(), d in 4usize..64, k in 1usize..4) {
        let mut rng = SimRng::new(seed);
        let mut basis = DirectionBasis::new(d);
        for _ in 0..k {
            let v = sample_complement(&mut rng, &basis).unwrap();
            basis.push(v).unwrap();
        }
        let w = sample_complement(&mut rng, &basis).unwrap();
        prop_assert!((norm(&w) - 1.0).abs() < 1e-12);
        for (i, u) in basis.vectors().iter().enumerate() {
            prop_assert!(dot(u, &w).abs() < 1e-10);
            for v in &basis.vectors()[..i] {
                prop_assert!(dot(u, v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn orthogonal_combinations_stay_in_the_ball(seed in any::<u64>(), d in 3usize..50, angle in 0.0f64..std::f64::consts::TAU) {
        let mut rng = SimRng::new(seed);
        let mut basis = DirectionBasis::new(d);
        let u = sample_complement(&mut rng, &basis).unwrap();
        basis.push(u.clone()).unwrap();
        let v = sample_complement(&mut rng, &basis).unwrap();
        let c = combine_scaled(&u, &v, angle.cos(), angle.sin()).unwrap();
        prop_assert!(norm(&c) <= 1.0 + 1e-12);
    }

    #[test]
    fn envelope_dominates_the_link(f in link_strategy(), x in 0.0f64..=1.0) {
        let g = f.envelope_g(x).unwrap();
        prop_assert!(g >= f.value(x).abs());
        prop_assert!(g >= f.value(-x).abs());
        prop_assert!(g <= 1.0 + 1e-12);
    }

    #[test]
    fn increasing_tables_make_valid_links(mut ys in prop::collection::vec(0.0f64..1.0, 3..10)) {
        ys.sort_by(f64::total_cmp);
        let n = ys.len() + 1;
        let mut points = vec![[0.0, 0.0]];
        for (k, y) in ys.iter().enumerate() {
            points.push([(k + 1) as f64 / n as f64, *y]);
        }
        points.push([1.0, 1.0]);
        prop_assert!(LinkFunction::piecewise(points.clone(), Some(Mirror::Odd)).is_ok());
        prop_assert!(LinkFunction::piecewise(points, Some(Mirror::Even)).is_ok());
    }

    #[test]
    fn ledger_counts_every_query(seed in any::<u64>(), batches in prop::collection::vec(1u64..1000, 1..20)) {
        let d = 6;
        let f = LinkFunction::cubic();
        let mut env = RidgeEnvironment::spawn(d, f.clone(), 1.0, SimRng::new(seed), None).unwrap();
        let mut rng = SimRng::new(seed ^ 1);
        let mut regret = 0.0;
        for &n in &batches {
            let a: Vec<f64> = sample_sphere(&mut rng, d).iter().map(|x| 0.9 * x).collect();
            regret += n as f64 * (env.best_value() - f.value(dot(env.theta_star(), &a)));
            if n == 1 { env.query(&a).unwrap(); } else { env.query_batch(&a, n).unwrap(); }
        }
        let total: u64 = batches.iter().sum();
        prop_assert_eq!(env.queries(), total);
        prop_assert_eq!(env.ledger().trajectory().iter().map(|e| e.count).sum::<u64>(), total);
        prop_assert!((env.ledger().cumulative_regret() - regret).abs() <= 1e-9 * regret.max(1.0));
        prop_assert!(env.ledger().cumulative_regret() >= 0.0);
    }

    #[test]
    fn actions_outside_the_ball_are_rejected(seed in any::<u64>(), scale in 1.001f64..3.0) {
        let mut env = RidgeEnvironment::spawn(5, LinkFunction::identity(), 1.0, SimRng::new(seed), None).unwrap();
        let a: Vec<f64> = sample_sphere(&mut SimRng::new(seed), 5).iter().map(|x| scale * x).collect();
        prop_assert!(env.query(&a).is_err());
        prop_assert_eq!(env.queries(), 0);
    }

    #[test]
    fn projection_is_feasible(seed in any::<u64>(), d in 2usize..40) {
        let mut rng = SimRng::new(seed);
        let a0 = sample_sphere(&mut rng, d);
        let mut theta: Vec<f64> = sample_sphere(&mut rng, d).iter().map(|x| x * (0.1 + rng.uniform())).collect();
        project_feasible(&mut theta, Some(&a0));
        prop_assert!((norm(&theta) - 1.0).abs() < 1e-9);
        prop_assert!(dot(&theta, &a0) >= 0.5 - 1e-9);
    }

    #[test]
    fn explore_actions_keep_correlation(seed in any::<u64>(), d in 2usize..40, t in 0u64..10_000) {
        let mut rng = SimRng::new(seed);
        let theta = sample_sphere(&mut rng, d);
        let w = sample_sphere(&mut rng, d);
        let mut a0: Vec<f64> = theta.iter().zip(&w).map(|(x, y)| x + 0.5 * y).collect();
        crate::geometry::normalize(&mut a0);
        prop_assume!(dot(&theta, &a0) >= 0.5);
        let a = explore_actions(&a0).unwrap().action(t);
        prop_assert!(norm(&a) <= 1.0 + 1e-12);
        prop_assert!(dot(&theta, &a) >= 0.125 - 1e-12);
    }

    #[test]
    fn merging_rows_shifts_the_objective_by_a_constant(seed in any::<u64>(), reps in 1usize..5) {
        let d = 4;
        let f = LinkFunction::cubic();
        let mut rng = SimRng::new(seed);
        let actions: Vec<Vec<f64>> = (0..3).map(|_| sample_sphere(&mut rng, d)).collect();
        let mut history = Vec::new();
        for _ in 0..reps {
            for a in &actions {
                history.push((a.clone(), rng.normal()));
            }
        }
        let data = RegressionData::from_history(&history);
        prop_assert_eq!(data.rows(), 3);
        let direct = |th: &[f64]| history.iter().map(|(a, r)| (f.value(dot(a, th)) - r).powi(2)).sum::<f64>();
        let t1 = sample_sphere(&mut rng, d);
        let t2 = sample_sphere(&mut rng, d);
        let lhs = data.objective(&f, &t1) - data.objective(&f, &t2);
        let rhs = direct(&t1) - direct(&t2);
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + rhs.abs()));
    }

    #[test]
    fn confidence_sets_grow_with_the_budget(seed in any::<u64>(), small in 0.0f64..2.0, extra in 0.0f64..2.0) {
        let d = 5;
        let mut rng = SimRng::new(seed);
        let mut set = ConfidenceSet::new(LinkFunction::cubic(), d, small);
        for _ in 0..20 {
            set.push(sample_sphere(&mut rng, d), rng.normal());
        }
        set.set_center(sample_sphere(&mut rng, d));
        let mut wide = set.clone();
        wide.est_budget = small + extra;
        let th = sample_sphere(&mut rng, d);
        prop_assert!(!set.contains(&th) || wide.contains(&th));
    }

    #[test]
    fn estimation_budget_is_increasing(t in 1u64..1_000_000, d in 1usize..500) {
        prop_assert!(estimation_budget(4.0, d, t + 1) > estimation_budget(4.0, d, t));
    }

    #[test]
    fn lower_bound_sequence_is_nondecreasing(f in link_strategy(), d in 2usize..200, delta in 0.01f64..0.9) {
        let eps = lb_epsilon_terms(&f, d, 1.0, delta, 2000).unwrap();
        prop_assert!(eps.windows(2).all(|w| w[1] >= w[0]));
        prop_assert!(eps.iter().all(|&e| e > 0.0 && e <= 1.0));
    }

    #[test]
    fn integrals_are_monotone_and_nonnegative(f in link_strategy(), d in 16usize..5000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let lo = (1.0 / d as f64).sqrt();
        let (a, b) = (lo + (0.5 - lo) * a.min(b), lo + (0.5 - lo) * a.max(b));
        let ua = burnin_integral_ub(&f, d, a, 1.0, 256).unwrap();
        let ub = burnin_integral_ub(&f, d, b, 1.0, 256).unwrap();
        prop_assert!(ua >= 0.0 && ub >= ua * (1.0 - 1e-9));
        let la = burnin_integral_lb(&f, d, a, 1.0, 1.0, 256).unwrap();
        let lb = burnin_integral_lb(&f, d, b, 1.0, 1.0, 256).unwrap();
        prop_assert!(la >= 0.0 && lb >= la * (1.0 - 1e-9));
    }

    #[test]
    fn median_lies_between_extremes(v in prop::collection::vec(-1e6f64..1e6, 1..50)) {
        let m = median(&v);
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= m && m <= hi);
    }

    #[test]
    fn wilson_interval_contains_the_estimate(n in 1usize..1000, k in 0usize..1000) {
        let k = k.min(n);
        let [lo, hi] = wilson_interval(k, n, 1.96);
        let p = k as f64 / n as f64;
        prop_assert!(lo <= p + 1e-12 && p <= hi + 1e-12);
        prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
    }

    #[test]
    fn trial_seeds_differ(base in any::<u64>(), d in 1usize..10_000, t in 0usize..1000) {
        prop_assert_ne!(trial_seed(base, d, t), trial_seed(base, d, t + 1));
        prop_assert_ne!(trial_seed(base, d, t), trial_seed(base, d + 1, t));
    }
}
