use mfdrbsde::conditions::{contraction_value, find_delta, lambda_contraction, sigma_contraction, Regime};
use mfdrbsde::drbsde::{budget_residual, check_invariants, random_frozen_data, skorokhod_residuals, solve_reflected};
use mfdrbsde::model::Lipschitz;
use mfdrbsde::Lattice;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lipschitz() -> impl Strategy<Value = Lipschitz> {
    (0.0..3.0f64, 0.0..0.3f64, 0.0..0.3f64, 0.0..0.3f64, 0.0..0.3f64).prop_map(|(cf, gamma1, gamma2, beta1, beta2)| {
        Lipschitz {
            cf,
            gamma1,
            gamma2,
            beta1,
            beta2,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reflected_solution_invariants(seed in any::<u64>(), steps in 1usize..40, horizon in 0.1..3.0f64) {
        let lat = Lattice::new(horizon, steps).unwrap();
        let fd = random_frozen_data(&lat, &mut ChaCha8Rng::seed_from_u64(seed));
        let sol = solve_reflected(&fd, &lat).unwrap();
        let inv = check_invariants(&sol, &fd.lower, &fd.upper);
        prop_assert_eq!(inv.barrier_violation, 0.0);
        prop_assert_eq!(inv.negative_push, 0.0);
        prop_assert_eq!(inv.simultaneous_push, 0.0);
        let (p, m) = skorokhod_residuals(&sol, &fd.lower, &fd.upper, &lat);
        prop_assert!(p.abs() <= 1e-10 && m.abs() <= 1e-10);
        prop_assert!(budget_residual(&sol, &fd.driver, &lat) <= 1e-10);
    }

    #[test]
    fn raising_the_lower_barrier_raises_the_solution(seed in any::<u64>(), steps in 1usize..25, lift in 0.0..0.5f64) {
        let lat = Lattice::new(1.0, steps).unwrap();
        let fd = random_frozen_data(&lat, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut raised = fd.clone();
        for k in 0..steps {
            for j in 0..=k {
                let (l, u) = (fd.lower.get(k, j), fd.upper.get(k, j));
                raised.lower.set(k, j, (l + lift).min(0.5 * (l + u)));
            }
        }
        let a = solve_reflected(&fd, &lat).unwrap();
        let b = solve_reflected(&raised, &lat).unwrap();
        for ((_, _, x), (_, _, y)) in a.y.iter_nodes().zip(b.y.iter_nodes()) {
            prop_assert!(y >= x - 1e-12);
        }
    }

    #[test]
    fn delta_certificate(lip in lipschitz(), p in 1.0..6.0f64, target in 0.3..0.999f64) {
        let regime = Regime::from_p(p).unwrap();
        if let Some(d) = find_delta(&lip, regime, target, 1.0).unwrap() {
            prop_assert!(contraction_value(&lip, regime, d).unwrap() <= target);
            if d < 1.0 {
                prop_assert!(contraction_value(&lip, regime, d * (1.0 + 1e-6)).unwrap() > target);
            }
        } else {
            prop_assert!(contraction_value(&lip, regime, 0.0).unwrap() > target);
        }
    }

    #[test]
    fn contraction_formulas_grow_with_delta(lip in lipschitz(), p in 1.01..6.0f64, d in 0.0..2.0f64, step in 0.0..1.0f64) {
        prop_assert!(lambda_contraction(&lip, p, d + step).unwrap() >= lambda_contraction(&lip, p, d).unwrap());
        prop_assert!(sigma_contraction(&lip, d + step) >= sigma_contraction(&lip, d));
    }
}
