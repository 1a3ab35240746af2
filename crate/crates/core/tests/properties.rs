use invlab::bsde::{DriverSpec, HatBasis};
use invlab::config::ExperimentConfig;
use invlab::functions::StateFunction;
use invlab::grid::TimeGrid;
use invlab::hazard::HazardModel;
use invlab::measure::{expect_p, expect_q, zero_mean_test};
use invlab::model::ModelConfig;
use invlab::pde::{maximum_principle_check, solve_feynman_kac, PdeConfig, PdeGrid};
use invlab::rng::derive_seed;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unit_weights_make_p_and_q_agree(xs in prop::collection::vec(-10.0f64..10.0, 2..200)) {
        let ones = vec![1.0; xs.len()];
        let p = expect_p(&xs, &ones).unwrap();
        let q = expect_q(&xs).unwrap();
        prop_assert!((p.mean - q.mean).abs() <= 1e-12 * (1.0 + q.mean.abs()));
        prop_assert!((p.std_error - q.std_error).abs() <= 1e-9 * (1.0 + q.std_error));
    }

    #[test]
    fn zero_mean_test_ignores_path_order(xs in prop::collection::vec(-5.0f64..5.0, 3..100), rot in 0usize..100) {
        let n = xs.len();
        let a = zero_mean_test(n, 1, None, 4.0, 1e-12, |p| Ok(vec![xs[p]])).unwrap();
        let b = zero_mean_test(n, 1, None, 4.0, 1e-12, |p| Ok(vec![xs[(p + rot) % n]])).unwrap();
        prop_assert!((a.means[0] - b.means[0]).abs() <= 1e-12);
        prop_assert!((a.std_errors[0] - b.std_errors[0]).abs() <= 1e-12);
    }

    #[test]
    fn hat_basis_reproduces_affine_functions(
        mut knots in prop::collection::btree_set(-400i32..400, 2..12),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        x in -4.0f64..4.0,
    ) {
        knots.insert(-401);
        let knots: Vec<f64> = knots.into_iter().map(|k| k as f64 / 100.0).collect();
        let coef: Vec<f64> = knots.iter().map(|k| a + b * k).collect();
        let basis = HatBasis { knots: knots.clone() };
        let clamped = x.clamp(knots[0], *knots.last().unwrap());
        prop_assert!((basis.eval(&coef, x) - (a + b * clamped)).abs() <= 1e-12);
    }

    #[test]
    fn funding_driver_is_lipschitz_in_v(
        borrow in 0.0f64..0.2, lend in 0.0f64..0.2, gamma in 0.0f64..3.0,
        v1 in -5.0f64..5.0, v2 in -5.0f64..5.0, k in -2.0f64..2.0,
    ) {
        let d = DriverSpec::Funding { borrow, lend, k_weight: 0.1 };
        let lhs = (d.eval(gamma, v1, k, 0.0) - d.eval(gamma, v2, k, 0.0)).abs();
        prop_assert!(lhs <= d.lipschitz_v(gamma) * (v1 - v2).abs() + 1e-12);
    }

    #[test]
    fn dgc_hazard_point_is_admissible(t in 0.01f64..1.0, m in -4.0f64..4.0) {
        let model = HazardModel::new(ModelConfig::dgc()).unwrap();
        let p = model.point(t, m).unwrap();
        prop_assert!(p.s > 0.0 && p.s < 1.0);
        prop_assert!(p.gamma >= 0.0 && p.gamma.is_finite());
        prop_assert!(p.mu.is_finite());
    }

    #[test]
    fn cox_hazard_is_the_rate(rate in 0.01f64..2.0, t in 0.0f64..1.0, m in -4.0f64..4.0) {
        let model = HazardModel::new(ModelConfig::cox(rate)).unwrap();
        let p = model.point(t, m).unwrap();
        prop_assert!((p.gamma - rate).abs() <= 1e-12);
        prop_assert_eq!(p.mu, 0.0);
        prop_assert!((p.s - (-rate * t).exp()).abs() <= 1e-12);
    }

    #[test]
    fn fingerprint_ignores_output_dir(dir in "[a-z]{1,12}", seed in any::<u64>()) {
        let mut a = ExperimentConfig::new(ModelConfig::dgc());
        a.seed = seed;
        let mut b = a.clone();
        b.output_dir = dir.into();
        prop_assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        b.seed = seed.wrapping_add(1);
        prop_assert_ne!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
    }

    #[test]
    fn derived_seeds_are_stable_and_distinct(seed in any::<u64>(), tag in 0u64..1000) {
        prop_assert_eq!(derive_seed(seed, tag), derive_seed(seed, tag));
        prop_assert_ne!(derive_seed(seed, tag), derive_seed(seed, tag + 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pde_respects_the_maximum_principle(
        value in -2.0f64..2.0,
        scale in 0.05f64..2.0,
        cap in 0.1f64..3.0,
        level in -1.0f64..1.0,
        n_m in 21usize..300,
        n_steps in 4usize..120,
        cox in any::<bool>(),
    ) {
        let model = HazardModel::new(if cox { ModelConfig::cox(2.0) } else { ModelConfig::dgc() }).unwrap();
        let cfg = PdeConfig { n_m, ..PdeConfig::default() };
        let grid = PdeGrid::covering(&model, TimeGrid::uniform(1.0, n_steps).unwrap(), &cfg).unwrap();
        let payoffs = [
            StateFunction::Constant { value },
            StateFunction::SmoothStep { scale },
            StateFunction::PositivePart { cap },
            StateFunction::FactorAbove { level },
        ];
        for g in payoffs {
            let sol = solve_feynman_kac(&model, &g, &grid, &cfg).unwrap();
            let e = maximum_principle_check(&sol, &g);
            prop_assert!(e.pass, "{} with n_m = {}, {} steps: {} > {}", e.detail, n_m, n_steps, e.lhs, e.rhs);
        }
    }
}
