use pfljscc_core::theory::{
    check_lemma7, lambda_positivity_probe, lemma7_caps, rate_check, theorem_coefficients,
    theorem_rhs, verify_theorem_empirically, CoefficientOptions, SmoothnessConstants,
    SyntheticProblem, SyntheticSpec, VerifyConfig,
};
use proptest::prelude::*;

fn l_strategy() -> impl Strategy<Value = f64> {
    (-1.0f64..=1.0).prop_map(|e| 10f64.powf(e))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn drift_inequalities_hold_at_caps(
        l_u in l_strategy(), l_v in l_strategy(), l_uv in l_strategy(), l_vu in l_strategy(), tau in 1usize..=20,
    ) {
        let k = SmoothnessConstants::smooth(l_u, l_v, l_uv, l_vu);
        let (eu, ev) = lemma7_caps(tau, &k);
        let check = check_lemma7(eu, ev, tau, &k);
        prop_assert!(check.holds, "{k:?} tau={tau} {check:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn rhs_is_monotone(
        t in 1usize..1000, s_u in 0.0f64..2.0, s_v in 0.0f64..2.0, d in 0.0f64..2.0, bump in 0.01f64..1.0, gap in 0.0f64..10.0,
    ) {
        let mut k = SmoothnessConstants::smooth(1.0, 2.0, 0.5, 0.7);
        k.sigma_u = s_u;
        k.sigma_v = s_v;
        k.delta = d;
        let tc = theorem_coefficients(0.05, 5, &k, CoefficientOptions::default()).unwrap();
        let base = theorem_rhs(gap, 0.0, t, &tc, &k);
        prop_assert!(theorem_rhs(gap, 0.0, t + 1, &tc, &k) <= base);
        for i in 0..3 {
            let mut k2 = k;
            match i {
                0 => k2.sigma_u += bump,
                1 => k2.sigma_v += bump,
                _ => k2.delta += bump,
            }
            prop_assert!(theorem_rhs(gap, 0.0, t, &tc, &k2) >= base);
        }
    }
}

#[test]
fn lambda_positivity_probe_logs_counterexamples() {
    let probe = lambda_positivity_probe(10_000, 11, CoefficientOptions::default());
    for ce in probe.counterexamples.iter().take(5) {
        println!("nonpositive lambda: {ce:?}");
    }
    println!(
        "{} of {} draws had a nonpositive lambda",
        probe.counterexamples.len(),
        probe.draws
    );
    assert_eq!(probe.draws, 10_000);
    // Every logged draw is a genuine violation under direct evaluation.
    let e2m1 = std::f64::consts::E.powi(2) - 1.0;
    for ce in &probe.counterexamples {
        let k = ce.constants;
        let (c, t2) = (ce.c, (ce.tau * ce.tau) as f64);
        let l1 = c / (4.0 * k.l_u)
            - 15.0 * e2m1 * c.powi(3) / (4.0 * t2 * k.l_u)
            - 15.0 * e2m1 * k.l_vu.powi(2) * c * c / (4.0 * t2 * k.l_u.powi(2) * k.l_v);
        let l2 = c / (4.0 * k.l_v)
            - 15.0 * e2m1 * c.powi(3) / (4.0 * t2 * k.l_v)
            - 5.0 * e2m1 * k.l_uv.powi(2) * c * c / (4.0 * t2 * k.l_v.powi(2) * k.l_u);
        assert!(l1 <= 0.0 || l2 <= 0.0, "{ce:?}");
        assert!((l1 - ce.lambda1).abs() <= 1e-12 * l1.abs().max(1e-3));
        assert!(ce.tau >= 2);
    }
}

#[test]
fn bound_holds_across_horizons() {
    let p = SyntheticProblem::new(SyntheticSpec::deterministic_homogeneous(1)).unwrap();
    let rep =
        verify_theorem_empirically(&p, &[10, 20, 50, 100, 200], &VerifyConfig::new(1)).unwrap();
    for c in &rep.checks {
        println!(
            "T={} lhs={:.4e} rhs={:.4e} ratio={:.3}",
            c.rounds, c.lhs, c.rhs, c.ratio
        );
    }
    assert!(rep.pass);
    for w in rep.checks.windows(2) {
        assert!(w[1].lhs <= w[0].lhs * 1.05);
    }
}

#[test]
fn rate_slopes() {
    let p = SyntheticProblem::new(SyntheticSpec::deterministic_homogeneous(1)).unwrap();
    for q in [-0.25, -0.5, -0.75] {
        let rep = rate_check(&p, q, &[25, 50, 100, 200, 400], &VerifyConfig::new(1)).unwrap();
        println!(
            "q={q} slope={:.3} threshold={:.3} points={:?}",
            rep.slope, rep.threshold, rep.points
        );
        assert!(rep.pass);
    }
}
