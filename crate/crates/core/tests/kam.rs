use std::sync::Arc;

use apkam::apseries::{ApSeries, Basis, Window};
use apkam::frequency::{sample_alpha, sample_frequency, DiophantineParams, Lattice};
use apkam::kam::*;
use apkam::multiindex::MultiIndex;
use apkam::twistmap::TwistMap;
use apkam::Error;

fn basis() -> Arc<Basis> {
    let lattice = Lattice { max_dim: 4, max_weight: 8, max_order: 8 };
    let (mut ctx, _) = sample_frequency(lattice, DiophantineParams::default(), 0, 100).unwrap();
    sample_alpha(&mut ctx, (0.4, 0.6), 1e-4, 0, 10_000).unwrap();
    Basis::new(ctx).unwrap()
}

const WINDOW: Window = Window { r: 1.0, s: 0.05 };

fn schedule(max_stage: usize) -> KamSchedule {
    let mut s = KamSchedule::new(1.0, 1e-4, max_stage).unwrap();
    s.s0 = WINDOW.s;
    s
}

fn zero_map(b: &Arc<Basis>) -> TwistMap {
    TwistMap::new(ApSeries::zero(b, 4), ApSeries::zero(b, 4), (0.4, 0.6), WINDOW).unwrap()
}

fn run(map: &TwistMap, tol: f64) -> apkam::Result<InvariantCurve> {
    kam_iterate(map, &schedule(6), &IterateOptions::practical(tol))
}

/// Independent check of `U o M+ = M o U` on a grid.
fn conjugacy_gap(map: &TwistMap, out: &StepOutcome, s: f64) -> f64 {
    let alpha = map.alpha();
    let mut worst: f64 = 0.0;
    for i in 0..40 {
        for j in 0..5 {
            let xi = 7.3 * i as f64;
            let eta = alpha + s * (j as f64 / 4.0 - 0.5);
            let m1 = (xi + eta + out.f_plus.evaluate_real(xi, eta), eta + out.g_plus.evaluate_real(xi, eta));
            let lhs = out.transform.apply(m1.0, m1.1);
            let (x, y) = out.transform.apply(xi, eta);
            let rhs = map.apply(x, y);
            worst = worst.max((lhs.0 - rhs.0).abs()).max((lhs.1 - rhs.1).abs());
        }
    }
    worst
}

#[test]
fn zero_perturbation_step_and_run() {
    let b = basis();
    let map = zero_map(&b);
    let out = kam_step(&map.f, &map.g, WINDOW, Window { r: 0.7, s: 0.01 }, &KamConstants::default(), Mode::Practical).unwrap();
    assert!(out.transform.u.is_zero() && out.transform.v.is_zero());
    assert!(out.f_plus.is_zero() && out.g_plus.is_zero());

    let curve = run(&map, 1e-10).unwrap();
    assert!(curve.stage_log.is_empty());
    assert_eq!(curve.conjugacy_residual, 0.0);
    assert_eq!(curve.v.evaluate_real(3.0, 0.0), b.alpha());
    assert_eq!(verify_conjugacy(&curve, &map, 100), 0.0);
    // Only the rounding of xi0 + k alpha separates orbit and prediction.
    let shadow = orbit_shadow_check(&curve, &map, 4, 1000);
    assert!(shadow.max_deviation < 1e-10);
}

#[test]
fn single_mode_step_is_quadratic_on_the_curve() {
    let b = basis();
    let e1 = MultiIndex::unit(1, 1);
    let target = Window { r: 0.7, s: 0.01 };
    let mut slice_sizes = Vec::new();
    for eps in [1e-6, 5e-7] {
        let g = ApSeries::trig_sum(&b, 6, &[(e1.clone(), 2.0 * eps, 0.0)]).unwrap();
        let map = TwistMap::new(ApSeries::zero(&b, 6), g, (0.4, 0.6), WINDOW).unwrap();
        let out = kam_step(&map.f, &map.g, WINDOW, target, &KamConstants::default(), Mode::Practical).unwrap();
        assert!(conjugacy_gap(&map, &out, target.s) < 1e-12);
        assert!(out.estimates.eps_out <= out.estimates.q_bound);
        slice_sizes.push(out.f_plus.restrict_y(0.0).norm_r(target.r) + out.g_plus.restrict_y(0.0).norm_r(target.r));
    }
    let ratio = slice_sizes[0] / slice_sizes[1];
    assert!((ratio - 4.0).abs() < 0.05, "ratio {ratio}");
}

#[test]
fn step_records_hypotheses_and_cross_checks() {
    let b = basis();
    let map = TwistMap::cosine_example(&b, 6, 1e-6, 4, WINDOW).unwrap();
    let target = Window { r: 0.7, s: 1e-3 };
    let out = kam_step(&map.f, &map.g, WINDOW, target, &KamConstants::default(), Mode::Practical).unwrap();
    let est = &out.estimates;
    assert_eq!(est.conditions.len(), 7);
    for c in &est.conditions {
        assert_eq!(c.holds, c.lhs < c.rhs, "{}", c.name);
    }
    for c in &est.cross_checks {
        assert!(c.holds, "{} fails: {} > {}", c.name, c.lhs, c.rhs);
    }
    assert!(est.identity_defect < 1e-9);
    assert!(est.g_plus_root);
    assert!(conjugacy_gap(&map, &out, target.s) < 1e-12);

    let strict = kam_step(&map.f, &map.g, WINDOW, target, &KamConstants::default(), Mode::Paper);
    assert!(matches!(strict, Err(Error::ConditionViolation { .. })));
}

#[test]
fn mean_value_trap_is_bounded_by_three_q() {
    let b = basis();
    let (c, eps) = (1e-8, 1e-6);
    let e1 = MultiIndex::unit(1, 1);
    let g = ApSeries::trig_sum(&b, 6, &[(e1, eps, 0.4)]).unwrap().add_constant(c);
    let map = TwistMap::new(ApSeries::zero(&b, 6), g, (0.4, 0.6), WINDOW).unwrap();
    // The mean is nonzero, yet every horizontal line meets its image.
    let line = ApSeries::constant(&b, 0, b.alpha());
    assert!(map.intersection_check(&line, (0.0, 100.0), 200).unwrap().found);

    let target = Window { r: 0.7, s: 1e-3 };
    let out = kam_step(&map.f, &map.g, WINDOW, target, &KamConstants::default(), Mode::Practical).unwrap();
    let est = &out.estimates;
    assert!((est.h_sup - c).abs() < 1e-22);
    assert!(est.h_sup <= 3.0 * est.q_bound);
    assert!(est.cross_checks.iter().find(|x| x.name == "h_bound").unwrap().holds);
    // The unremoved mean survives into g+ at eta = alpha.
    assert!((out.g_plus.mean()[0].re - c).abs() < 1e-12);
    assert!(conjugacy_gap(&map, &out, target.s) < 1e-12);
}

#[test]
fn fixture_converges_and_shadows_orbits() {
    let b = basis();
    let map = TwistMap::cosine_example(&b, 8, 1e-6, 4, WINDOW).unwrap();
    let curve = run(&map, 1e-10).unwrap();
    assert!(!curve.stage_log.is_empty() && curve.stage_log.len() <= 6);
    assert!(curve.conjugacy_residual < 1e-10);
    let independent = verify_conjugacy(&curve, &map, 10_000);
    assert!(independent < 1e-10, "{independent}");
    let shadow = orbit_shadow_check(&curve, &map, 8, 1000);
    assert!(shadow.max_deviation < 1e-6);
    assert!(shadow.rotation_defect <= shadow.max_deviation);
    assert!(curve.norm_bound < 1e-2);

    for w in curve.stage_log.windows(2) {
        assert!(w[1].s_n < w[0].s_n && w[1].r_n < w[0].r_n);
        assert!(w[1].residual < w[0].residual);
    }
    let csv = curve.stage_csv();
    assert!(csv.starts_with("stage,r_n,s_n,eps_measured,Q_bound,residual\n"));
    assert_eq!(csv.lines().count(), curve.stage_log.len() + 1);
}

#[test]
fn injected_error_is_detected() {
    let b = basis();
    let map = TwistMap::cosine_example(&b, 8, 1e-6, 4, WINDOW).unwrap();
    let mut curve = run(&map, 1e-10).unwrap();
    let e1 = MultiIndex::unit(1, 1);
    let bump = ApSeries::trig_sum(&b, 0, &[(e1, 1e-3, 0.0)]).unwrap();
    curve.u = curve.u.add(&bump).unwrap();
    let res = verify_conjugacy(&curve, &map, 4096);
    // The defect of the bump alone is 1e-3 (cos(w x) - cos(w (x + alpha))).
    let expected = 2e-3 * (0.5 * b.context().omega[0] * b.alpha()).sin().abs();
    assert!((res - expected).abs() < 0.02 * expected, "{res} vs {expected}");
}

#[test]
fn non_invariant_curve_drifts() {
    let b = basis();
    let map = TwistMap::cosine_example(&b, 8, 1e-6, 4, WINDOW).unwrap();
    let mut curve = InvariantCurve::trivial(&b);
    let e2 = MultiIndex::unit(2, 1);
    curve.v = curve.v.add(&ApSeries::trig_sum(&b, 0, &[(e2, 1e-2, 0.3)]).unwrap()).unwrap();
    let shadow = orbit_shadow_check(&curve, &map, 8, 100);
    assert!(shadow.deviation_by_decade[2] > 10.0 * shadow.deviation_by_decade[0]);
    assert!(shadow.max_deviation > 1e-2);
}

#[test]
fn paper_mode_reports_the_violated_condition() {
    let b = basis();
    let map = TwistMap::cosine_example(&b, 8, 1e-6, 4, WINDOW).unwrap();
    let sched = KamSchedule::new(1.0, 1e-4, 6).unwrap();
    match kam_iterate(&map, &sched, &IterateOptions::paper()) {
        Err(Error::ConditionViolation { condition, lhs, rhs }) => {
            assert_eq!(condition, "smallness");
            assert!(lhs >= rhs);
        }
        other => panic!("expected a condition violation, got {other:?}"),
    }
    let tiny = KamSchedule::new(1.0, 1e-9, 6).unwrap();
    assert!(matches!(
        kam_iterate(&map, &tiny, &IterateOptions::paper()),
        Err(Error::ConditionViolation { condition, .. }) if condition == "eps0"
    ));
}

#[test]
fn breakdown_scan_brackets_a_threshold() {
    let b = basis();
    let outcome = |eps: f64| {
        let map = TwistMap::cosine_example(&b, 6, eps, 4, WINDOW).unwrap();
        kam_iterate(&map, &schedule(6), &IterateOptions::practical(1e-10))
    };
    let (mut lo, mut hi) = (1e-6f64, 1e-1f64);
    assert!(outcome(lo).is_ok());
    let err = outcome(hi).unwrap_err();
    assert!(matches!(err, Error::NoConvergence { .. }), "{err}");
    for _ in 0..5 {
        let mid = (lo * hi).sqrt();
        match outcome(mid) {
            Ok(_) => lo = mid,
            Err(Error::NoConvergence { residuals, .. }) => {
                let completed = residuals.len().saturating_sub(1);
                assert!(residuals[..completed].windows(2).all(|w| w[1] < w[0]));
                hi = mid;
            }
            Err(e) => panic!("unexpected error {e}"),
        }
    }
    assert!(lo < hi && hi / lo < 2.0);
}

#[test]
fn contraction_fit_recovers_known_exponent() {
    let b = basis();
    let map = TwistMap::cosine_example(&b, 8, 1e-6, 4, WINDOW).unwrap();
    let mut curve = run(&map, 1e-13).unwrap();
    assert!(curve.stage_log.len() >= 2);
    let fit = fit_contraction(&curve.stage_log).unwrap();
    assert!(fit.exponent > 1.2, "{fit:?}");

    // Synthetic log with eps_(n+1) = 3 eps_n^(4/3).
    let template = curve.stage_log[0].clone();
    curve.stage_log.clear();
    let mut e = 1e-5f64;
    for n in 0..4 {
        let mut rec = template.clone();
        rec.stage = n;
        rec.estimates.eps_in = e;
        e = 3.0 * e.powf(4.0 / 3.0);
        rec.estimates.eps_out = e;
        curve.stage_log.push(rec);
    }
    let fit = fit_contraction(&curve.stage_log).unwrap();
    assert!((fit.exponent - 4.0 / 3.0).abs() < 1e-10);
    assert!((fit.log_c - 3f64.ln()).abs() < 1e-8);
}

#[test]
fn curve_round_trips_through_json() {
    let b = basis();
    let map = TwistMap::cosine_example(&b, 8, 1e-6, 4, WINDOW).unwrap();
    let curve = run(&map, 1e-10).unwrap();
    let text = serde_json::to_string(&curve.to_wire()).unwrap();
    let wire: CurveWire = serde_json::from_str(&text).unwrap();
    let back = InvariantCurve::from_wire(&b, &wire).unwrap();
    assert_eq!(verify_conjugacy(&back, &map, 500), verify_conjugacy(&curve, &map, 500));
}
