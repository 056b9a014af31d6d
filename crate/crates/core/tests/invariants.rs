use proptest::prelude::*;

use parisi::descent::girsanov_expect;
use parisi::dispersive::{bracket_psi, SpectralBudget};
use parisi::gauss::QuadratureConfig;
use parisi::model::{Model, SystemPoint};
use parisi::pde::DiscreteMeasure;
use parisi::scan::{fmt_sig, Axis};
use parisi::variational::{parisi_value, rs_value};

fn model_strategy() -> impl Strategy<Value = Model> {
    prop_oneof![
        Just(Model::sk()),
        Just(Model::pure(4, 0.25).unwrap()),
        Just("2:0.25,4:0.1".parse::<Model>().unwrap()),
        Just("2:0.25,3:0.2,4:0.25".parse::<Model>().unwrap()),
    ]
}

fn measure_strategy() -> impl Strategy<Value = DiscreteMeasure> {
    (1usize..=2)
        .prop_flat_map(|k| (proptest::collection::vec(0.02..0.97f64, k), proptest::collection::vec(0.05..0.95f64, k)))
        .prop_filter_map("distinct atoms", |(mut q, mut m)| {
            q.sort_by(f64::total_cmp);
            m.sort_by(f64::total_cmp);
            if q.windows(2).any(|w| w[1] - w[0] < 0.02) || m.windows(2).any(|w| w[1] - w[0] < 1e-3) {
                return None;
            }
            *m.last_mut().unwrap() = 1.0;
            DiscreteMeasure::new(q, m).ok()
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn measure_string_round_trip(mu in measure_strategy()) {
        let back: DiscreteMeasure = mu.to_string().parse().unwrap();
        prop_assert_eq!(back, mu);
    }

    #[test]
    fn model_string_round_trip(m in model_strategy()) {
        let back: Model = m.to_string().parse().unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn functional_is_convex_along_cdf_mixtures(
        m in model_strategy(),
        beta in 0.3..2.5f64,
        h in 0.0..1.5f64,
        a in measure_strategy(),
        b in measure_strategy(),
        theta in 0.1..0.9f64,
    ) {
        let cfg = QuadratureConfig::coarse();
        let p = SystemPoint::new(beta, h).unwrap();
        let mix = a.mix(&b, theta).unwrap();
        let pa = parisi_value(&m, p, &a, &cfg).unwrap().value;
        let pb = parisi_value(&m, p, &b, &cfg).unwrap().value;
        let pm = parisi_value(&m, p, &mix, &cfg).unwrap().value;
        prop_assert!(pm <= (1.0 - theta) * pa + theta * pb + 1e-9, "{pm} vs {pa} {pb}");
    }

    #[test]
    fn one_atom_functional_matches_closed_form(m in model_strategy(), beta in 0.3..3.0f64, h in 0.0..2.0f64, q in 0.0..0.95f64) {
        let cfg = QuadratureConfig::default();
        let p = SystemPoint::new(beta, h).unwrap();
        let via_pde = parisi_value(&m, p, &DiscreteMeasure::dirac(q).unwrap(), &cfg).unwrap().value;
        let closed = rs_value(&m, p, q, &cfg).unwrap();
        prop_assert!((via_pde - closed).abs() < 1e-10);
    }

    #[test]
    fn girsanov_law_is_a_probability(m in model_strategy(), beta in 0.3..4.0f64, h in 0.0..2.0f64, q in 0.0..0.9f64, u in 0.0..1.0f64) {
        let cfg = QuadratureConfig::default();
        let p = SystemPoint::new(beta, h).unwrap();
        let t = q + u * (1.0 - q);
        let one = girsanov_expect(&m, p, q, t, |_| 1.0, &cfg).unwrap();
        let s2 = girsanov_expect(&m, p, q, t, |x| x.cosh().recip().powi(2), &cfg).unwrap();
        prop_assert!((one - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&s2));
    }

    #[test]
    fn bracket_is_even_and_negative(x in -6.0..6.0f64) {
        let v = bracket_psi(x);
        prop_assert!(v < 0.0);
        prop_assert!((v - bracket_psi(-x)).abs() <= 1e-15 * v.abs().max(1e-300));
    }

    #[test]
    fn budget_is_monotone(
        m in model_strategy(),
        h0 in 0.5..3.0f64,
        alpha0 in 0.2..0.95f64,
        a in 1.0..3.0f64,
        da in 0.0..1.0f64,
        b in 5.0..50.0f64,
        db in 0.0..20.0f64,
        qt in 0.3..0.95f64,
        theta in 0.5..2.0f64,
    ) {
        let budget = SpectralBudget::new(&m, h0, alpha0);
        // nondecreasing in a and theta, nonincreasing in b
        prop_assert!(budget.c0(a + da, b, qt) >= budget.c0(a, b, qt));
        prop_assert!(budget.c0(a, b + db, qt) <= budget.c0(a, b, qt));
        prop_assert!(budget.c2(a + da, b, qt, theta) >= budget.c2(a, b, qt, theta));
        prop_assert!(budget.theta(a, b, qt, theta + 0.5) >= budget.theta(a, b, qt, theta));
        prop_assert!(budget.theta(a, b + db, qt, theta) <= budget.theta(a, b, qt, theta));
    }

    #[test]
    fn sig_format_round_trips(x in -1e15..1e15f64, e in -12i32..12) {
        let v = x * 10f64.powi(e);
        let back: f64 = fmt_sig(v).parse().unwrap();
        prop_assert!((back - v).abs() <= 1e-11 * v.abs());
    }

    #[test]
    fn axis_is_increasing_with_exact_ends(min in -5.0..5.0f64, width in 0.1..10.0f64, n in 2usize..200) {
        let a = Axis::new(min, min + width, n).unwrap();
        let v = a.values();
        prop_assert_eq!(v[0], min);
        prop_assert_eq!(v[n - 1], min + width);
        prop_assert!(v.windows(2).all(|w| w[1] > w[0]));
    }
}
