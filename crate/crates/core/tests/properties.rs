use drbsde::market::{ou_marginal, TransitionMode};
use drbsde::oracle::{Interpolant, Interpolation};
use drbsde::{rng, stats};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn euler_marginal_matches_geometric_sums(
        kappa in 0.1f64..5.0,
        mu in -2.0f64..2.0,
        sigma in 0.1f64..3.0,
        x0 in -3.0f64..3.0,
        n in 0usize..60,
    ) {
        let dt = 1.0 / 60.0;
        let (m, sd) = ou_marginal(kappa, mu, sigma, x0, dt, n, TransitionMode::Euler);
        let a = 1.0 - kappa * dt;
        let mean = mu + a.powi(n as i32) * (x0 - mu);
        let var = sigma * sigma * dt * (1.0 - a.powi(2 * n as i32)) / (1.0 - a * a);
        prop_assert!((m - mean).abs() < 1e-12);
        prop_assert!((sd * sd - var).abs() < 1e-12 * (1.0 + var));
    }

    #[test]
    fn exact_marginal_matches_closed_form(
        kappa in 0.1f64..5.0,
        sigma in 0.1f64..3.0,
        x0 in -3.0f64..3.0,
        n in 1usize..40,
    ) {
        let dt = 0.03;
        let (m, sd) = ou_marginal(kappa, 0.5, sigma, x0, dt, n, TransitionMode::Exact);
        let t = dt * n as f64;
        prop_assert!((m - (0.5 + (-kappa * t).exp() * (x0 - 0.5))).abs() < 1e-12);
        let var = sigma * sigma * (1.0 - (-2.0 * kappa * t).exp()) / (2.0 * kappa);
        prop_assert!((sd * sd - var).abs() < 1e-12);
    }

    #[test]
    fn pchip_preserves_monotone_data(steps in prop::collection::vec(0.0f64..1.0, 4..30), q in 0.0f64..1.0) {
        let mut y = vec![0.0];
        for s in &steps {
            y.push(y.last().unwrap() + s);
        }
        let n = y.len();
        let f = Interpolant::new(-1.0, 0.25, y.clone(), Interpolation::Pchip);
        let xs: Vec<f64> = (0..200).map(|i| -1.0 + 0.25 * (n - 1) as f64 * (i as f64 + q) / 200.0).collect();
        let vals: Vec<f64> = xs.iter().map(|&x| f.eval(x)).collect();
        for w in vals.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12);
        }
        for (i, &v) in y.iter().enumerate() {
            prop_assert!((f.eval(-1.0 + 0.25 * i as f64) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn two_sample_ks_is_symmetric_and_bounded(
        a in prop::collection::vec(-5.0f64..5.0, 1..80),
        b in prop::collection::vec(-5.0f64..5.0, 1..80),
    ) {
        let ab = stats::ks_two_sample(&a, &b);
        let ba = stats::ks_two_sample(&b, &a);
        prop_assert!((ab.statistic - ba.statistic).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&ab.statistic));
        prop_assert!((0.0..=1.0).contains(&ab.p_value));
        prop_assert_eq!(stats::ks_two_sample(&a, &a).statistic, 0.0);
    }

    #[test]
    fn two_sample_ks_matches_brute_force(
        a in prop::collection::vec(0u8..20, 1..40),
        b in prop::collection::vec(0u8..20, 1..40),
    ) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let ecdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
        let d = a.iter().chain(&b).map(|&x| (ecdf(&a, x) - ecdf(&b, x)).abs()).fold(0.0, f64::max);
        prop_assert!((stats::ks_two_sample(&a, &b).statistic - d).abs() < 1e-12);
    }

    #[test]
    fn derived_seeds_are_stable_and_separate(seed in any::<u64>(), i in 0u64..1000) {
        prop_assert_eq!(rng::derive(seed, &[i]), rng::derive(seed, &[i]));
        prop_assert_ne!(rng::derive(seed, &[i]), rng::derive(seed, &[i + 1]));
        prop_assert_ne!(rng::derive(seed, &[rng::tag("a"), i]), rng::derive(seed, &[rng::tag("b"), i]));
    }
}
