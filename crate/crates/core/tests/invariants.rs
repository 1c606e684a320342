//! Property-based invariants across the public API.

use fpklab::cost::CostFunction;
use fpklab::measures::ParticleCloud;
use fpklab::transport::{dual_value, kantorovich, synchronous_upper_bound};
use proptest::prelude::*;

fn cloud_strategy(max_n: usize) -> impl Strategy<Value = ParticleCloud> {
    (1usize..=max_n, 1usize..=2).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(-5.0f64..5.0, n * d),
            prop::collection::vec(0.01f64..1.0, n),
        )
            .prop_map(move |(pts, mut w)| {
                let total: f64 = w.iter().sum();
                w.iter_mut().for_each(|x| *x /= total);
                ParticleCloud::new(d, pts, w).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn integrate_normalization_and_linearity(cloud in cloud_strategy(24), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let one = cloud.integrate(|_| 1.0).unwrap();
        prop_assert!((one - 1.0).abs() < 1e-12);
        let f = |x: &[f64]| x[0].sin();
        let g = |x: &[f64]| x[0] * x[0];
        let lhs = cloud.integrate(|x| a * f(x) + b * g(x)).unwrap();
        let rhs = a * cloud.integrate(f).unwrap() + b * cloud.integrate(g).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn transport_plan_and_duals_are_consistent(
        mu in cloud_strategy(14),
        sigma in cloud_strategy(14),
        p in prop::sample::select(vec![1.0f64, 1.5, 2.0]),
    ) {
        prop_assume!(mu.dim() == sigma.dim());
        let h = CostFunction::capped_power(p).unwrap();
        let (cost, plan, duals) = kantorovich(&h, &mu, &sigma).unwrap();
        // coupling contract: marginals, positivity, recorded cost
        plan.validate(&h, &mu, &sigma).unwrap();
        // bounded by the sup norm of the cost
        prop_assert!((0.0..=h.sup_bound() + 1e-12).contains(&cost));
        // strong duality at the returned optimum
        let dv = dual_value(&duals, &h, &mu, &sigma).unwrap();
        prop_assert!((dv - cost).abs() <= 1e-8);
        // any explicit coupling dominates the optimum
        if mu.len() == sigma.len() && mu.weights() == sigma.weights() {
            let sync = synchronous_upper_bound(&h, &mu, &sigma).unwrap();
            prop_assert!(cost <= sync + 1e-10);
        }
    }

    #[test]
    fn cost_rescaling_composes(s1 in -1.5f64..1.5, s2 in -1.5f64..1.5, r in 0.0f64..4.0) {
        let h = CostFunction::capped_power(2.0).unwrap();
        let twice = h.rescaled(s1).unwrap().rescaled(s2).unwrap();
        let once = h.rescaled(s1 + s2).unwrap();
        prop_assert!((twice.eval(r).unwrap() - once.eval(r).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn cost_monotone_in_radius(p in prop::sample::select(vec![1.0f64, 2.0, 3.0]), r1 in 0.0f64..5.0, r2 in 0.0f64..5.0) {
        let h = CostFunction::capped_power(p).unwrap();
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        prop_assert!(h.eval(lo).unwrap() <= h.eval(hi).unwrap());
    }

    #[test]
    fn subsample_is_reproducible(cloud in cloud_strategy(20), n in 1usize..64, seed in any::<u64>()) {
        let a = cloud.subsample(n, seed).unwrap();
        let b = cloud.subsample(n, seed).unwrap();
        prop_assert_eq!(a.positions(), b.positions());
        prop_assert_eq!(a.len(), n);
    }
}
