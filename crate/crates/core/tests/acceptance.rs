//! Exit gate: one line per criterion, each with its pinned tolerance.

use std::f64::consts::PI;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use apkam::apseries::{invert_near_identity, ApSeries, Basis, Window};
use apkam::frequency::{
    rejection_fraction, sample_alpha, sample_frequency, DiophantineParams, FrequencyContext, Lattice,
};
use apkam::homological::{solve_difference, SolveOptions};
use apkam::kam::{kam_iterate, orbit_shadow_check, perturbation_size, verify_conjugacy, IterateOptions, KamSchedule};
use apkam::multiindex::MultiIndex;
use apkam::pendulum::{integrate_ivp, poincare_map, ChartOptions, PendulumSystem, PoincareState, SystemWire};
use apkam::twistmap::{MapDefinition, MapWire, TwistMap};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn read_json<T: serde::de::DeserializeOwned>(name: &str) -> T {
    let text = std::fs::read_to_string(fixtures().join(name)).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn fixture_basis() -> Arc<Basis> {
    Basis::new(read_json::<FrequencyContext>("ctx.json")).unwrap()
}

fn default_basis() -> Arc<Basis> {
    let (mut ctx, _) = sample_frequency(Lattice::default(), DiophantineParams::default(), 0, 100).unwrap();
    sample_alpha(&mut ctx, (0.4, 0.6), 1e-4, 0, 10_000).unwrap();
    Basis::new(ctx).unwrap()
}

fn fixture_map(name: &str) -> TwistMap {
    let wire: MapWire = read_json(name);
    MapDefinition::from_wire_embedded(&wire).unwrap().into_standard().unwrap().0
}

fn fixture_system(name: &str) -> PendulumSystem {
    PendulumSystem::from_wire(&read_json::<SystemWire>(name)).unwrap()
}

/// `sum_l sum_j |c_j| s^j e^(r weight(l))`, recomputed from the stored terms.
fn surrogate_norm(f: &ApSeries, w: Window) -> f64 {
    f.terms()
        .map(|(l, poly)| {
            let disk: f64 = poly.iter().enumerate().map(|(j, c)| c.norm() * w.s.powi(j as i32)).sum();
            disk * (w.r * l.weight() as f64).exp()
        })
        .sum()
}

/// A real series on the basis modes of weight in `1..=max_weight`, with
/// coefficients of size `scale e^(-weight / 2)`.
fn random_series(b: &Arc<Basis>, rng: &mut ChaCha8Rng, cap: usize, modes: usize, max_weight: u32, scale: f64) -> ApSeries {
    let pool: Vec<usize> = (1..b.len()).filter(|&p| b.weight(p) <= max_weight).collect();
    let mut terms: Vec<(MultiIndex, Vec<Complex64>)> = Vec::new();
    for _ in 0..modes {
        let pos = pool[rng.gen_range(0..pool.len())];
        let l = b.index(pos).clone();
        if terms.iter().any(|(m, _)| *m == l || *m == l.negate()) {
            continue;
        }
        let size = scale * (-0.5 * b.weight(pos) as f64).exp();
        let poly: Vec<Complex64> = (0..=cap)
            .map(|_| size * Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        terms.push((l.negate(), poly.iter().map(|c| c.conj()).collect()));
        terms.push((l, poly));
    }
    ApSeries::from_terms(b, cap, true, terms).unwrap()
}

fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// Relative slack for rounding in the left-hand sides of norm inequalities.
const ROUNDING: f64 = 1e-12;

fn criterion_1() -> Verdict {
    let b = default_basis();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (r, r_prime) = (1.0, 0.5);
    let window = Window::new(r, 0.1).unwrap();
    let gamma = b.context().params.gamma;
    let (mut worst_res, mut worst_ratio) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let h = random_series(&b, &mut rng, 0, 30, 12, 1.0);
        let (s, _) = solve_difference(&h, &SolveOptions::new(window, r_prime).unwrap()).unwrap();
        let defect = s.shift_x(b.alpha()).sub(&s).unwrap().sub(&h).unwrap();
        let h_norm = surrogate_norm(&h, window);
        worst_res = worst_res.max(surrogate_norm(&defect, window) / h_norm);
        let bound = h_norm * (r - r_prime).powi(-2).exp() / gamma;
        worst_ratio = worst_ratio.max(surrogate_norm(&s, Window::new(r_prime, 0.1).unwrap()) / bound);
    }
    verdict(
        worst_res < 1e-12 && worst_ratio <= 1.0,
        format!("max relative residual {worst_res:.2e} (< 1e-12), max ||s||/bound {worst_ratio:.2e} (<= 1)"),
    )
}

fn criterion_2() -> Verdict {
    let b = fixture_basis();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = Vec::new();
    for trial in 0..100 {
        let f = random_series(&b, &mut rng, 3, 8, 6, 1.0);
        let g = random_series(&b, &mut rng, 3, 8, 6, 1.0);
        let w = Window::new(rng.gen_range(0.05..1.0), rng.gen_range(0.05..1.0)).unwrap();
        let (nf, ng) = (surrogate_norm(&f, w), surrogate_norm(&g, w));
        let fg = f.mul(&g).unwrap();
        if surrogate_norm(&fg, w) > nf * ng * (1.0 + ROUNDING) + fg.truncation_bound(w) {
            failures.push(format!("product {trial}"));
        }
        if surrogate_norm(&f.add(&g).unwrap(), w) > (nf + ng) * (1.0 + ROUNDING) {
            failures.push(format!("triangle {trial}"));
        }
        let rp = w.r * rng.gen_range(0.05..0.95);
        if surrogate_norm(&f.dx(), Window::new(rp, w.s).unwrap()) > nf / (w.r - rp) * (1.0 + ROUNDING) {
            failures.push(format!("dx {trial}"));
        }
        let sp = w.s * rng.gen_range(0.05..0.95);
        if surrogate_norm(&f.dy(), Window::new(w.r, sp).unwrap()) > nf / (w.s - sp) * (1.0 + ROUNDING) {
            failures.push(format!("dy {trial}"));
        }
    }
    verdict(
        failures.is_empty(),
        format!("100 random cases per inequality, violations: {failures:?}"),
    )
}

fn criterion_3() -> Verdict {
    let b = fixture_basis();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let window = Window::new(0.3, 0.2).unwrap();
    let (dr, ds) = (0.1, 0.1);
    let target = window.shrink(dr, ds).unwrap();
    let alpha = b.alpha();
    let (mut worst_pt, mut worst_inv, mut worst_comp) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let u = random_series(&b, &mut rng, 2, 4, 4, 3e-4);
        let v = random_series(&b, &mut rng, 2, 4, 4, 3e-4);
        let eps = surrogate_norm(&u, window) + surrogate_norm(&v, window);
        let (up, vp) = invert_near_identity(&u, &v, window, (dr, ds)).unwrap();
        worst_inv = worst_inv.max((surrogate_norm(&up, target) + surrogate_norm(&vp, target)) / eps);
        for _ in 0..20 {
            let x = rng.gen_range(-50.0..50.0);
            let y = alpha + rng.gen_range(-0.5..0.5) * target.s;
            let (x1, y1) = (x + up.evaluate_real(x, y), y + vp.evaluate_real(x, y));
            let (x2, y2) = (x1 + u.evaluate_real(x1, y1), y1 + v.evaluate_real(x1, y1));
            worst_pt = worst_pt.max((x2 - x).abs()).max((y2 - y).abs());
        }
        // Composition estimate with the shifts measured on the target.
        let f = random_series(&b, &mut rng, 2, 6, 6, 1.0);
        let e_t = surrogate_norm(&u, target) + surrogate_norm(&v, target);
        let h = f.compose(&u, &v, target).unwrap();
        let bound = surrogate_norm(&f, window) * (e_t + (target.s + e_t) / window.s).exp() + h.truncation_bound(target);
        worst_comp = worst_comp.max(surrogate_norm(&h, target) / bound);
    }
    verdict(
        worst_pt < 1e-10 && worst_inv <= 1.0 && worst_comp <= 1.0 + ROUNDING,
        format!(
            "max round-trip deviation {worst_pt:.2e} (< 1e-10), max (||u'||+||v'||)/eps {worst_inv:.3} (<= 1), max composition norm/bound {worst_comp:.3} (<= 1)"
        ),
    )
}

fn fixture_run(tol: f64) -> (TwistMap, apkam::kam::InvariantCurve) {
    let map = fixture_map("map.json");
    let s0 = map.window.s;
    let mut schedule = KamSchedule::new(1.0, perturbation_size(&map.f, &map.g, Window::new(1.0, s0).unwrap()), 6).unwrap();
    schedule.s0 = s0;
    let curve = kam_iterate(&map, &schedule, &IterateOptions::practical(tol)).unwrap();
    (map, curve)
}

/// Max over sample points of both components of
/// `M(xi + u(xi), v(xi)) - (xi + alpha + u(xi + alpha), v(xi + alpha))`.
fn conjugacy_defect(map: &TwistMap, u: &ApSeries, v: &ApSeries, alpha: f64) -> f64 {
    let y0 = map.alpha();
    (0..2000)
        .map(|k| {
            let xi = 0.5 * k as f64;
            let (x1, y1) = map.apply(xi + u.evaluate_real(xi, y0), v.evaluate_real(xi, y0));
            let xn = xi + alpha;
            let dx = x1 - xn - u.evaluate_real(xn, y0);
            let dy = y1 - v.evaluate_real(xn, y0);
            dx.abs().max(dy.abs())
        })
        .fold(0.0, f64::max)
}

fn criterion_4() -> Verdict {
    let (map, curve) = fixture_run(1e-10);
    let alpha = map.alpha();
    let residual = verify_conjugacy(&curve, &map, 4096);
    let direct = conjugacy_defect(&map, &curve.u, &curve.v, curve.alpha);
    let shadow = orbit_shadow_check(&curve, &map, 8, 1000);
    // Rotation on the curve from raw iterates of the map.
    let y0 = map.alpha();
    let mut rotation: f64 = 0.0;
    for seed in 0..4 {
        let xi0 = 13.0 * seed as f64;
        let x0 = xi0 + curve.u.evaluate_real(xi0, y0);
        let (mut x, mut y) = (x0, curve.v.evaluate_real(xi0, y0));
        for n in 1..=1000 {
            (x, y) = map.apply(x, y);
            let xi_n = xi0 + n as f64 * alpha;
            let correction = curve.u.evaluate_real(xi_n, y0) - curve.u.evaluate_real(xi0, y0);
            rotation = rotation.max((x - x0 - n as f64 * alpha - correction).abs());
        }
    }
    verdict(
        curve.alpha == alpha && residual < 1e-10 && direct < 1e-10 && shadow.max_deviation < 1e-6 && rotation < 1e-6,
        format!(
            "residual {residual:.2e} (direct {direct:.2e}, < 1e-10), shadow {:.2e} (< 1e-6), rotation defect {rotation:.2e} (< 1e-6), {} stages",
            shadow.max_deviation,
            curve.stage_log.len()
        ),
    )
}

fn criterion_5() -> Verdict {
    // The tighter tolerance gives the stage log more than one step.
    let (_, curve) = fixture_run(1e-13);
    let pts: Vec<(f64, f64)> = curve
        .stage_log
        .iter()
        .map(|s| (s.estimates.eps_in.ln(), s.estimates.eps_out.ln()))
        .filter(|p| p.0.is_finite() && p.1.is_finite())
        .collect();
    let (exponent, how) = match pts.len() {
        0 => (f64::NAN, "no steps"),
        1 => (pts[0].1 / pts[0].0, "one step, C = 1"),
        _ => (slope(&pts), "least squares"),
    };
    verdict(
        exponent >= 1.2,
        format!("fitted exponent {exponent:.3} (>= 1.2) over {} steps, {how}", pts.len()),
    )
}

fn criterion_6() -> Verdict {
    let lattice = Lattice::default();
    let (_, stats) = sample_frequency(lattice, DiophantineParams::default(), 0, 10).unwrap();
    let trials = 1_000_000;
    let gammas = [1e-4, 1e-3, 1e-2];
    let fractions: Vec<f64> = gammas
        .iter()
        .map(|&g| {
            let p = DiophantineParams { gamma0: g, ..DiophantineParams::default() };
            rejection_fraction(lattice, p, trials, 6).unwrap()
        })
        .collect();
    // Resolution floor of the Monte Carlo estimate.
    let floor = 1.0 / trials as f64;
    let monotone = fractions.windows(2).all(|w| w[0] <= w[1]);
    let linear = (0..3).all(|i| {
        (i + 1..3).all(|j| fractions[j] <= 3.0 * (gammas[j] / gammas[i]) * fractions[i].max(floor))
    });
    verdict(
        stats.attempts <= 10 && monotone && linear,
        format!(
            "accepted after {} attempts (<= 10); rejection fractions {:?} at gamma0 {:?} (growth within 3x linear)",
            stats.attempts, fractions, gammas
        ),
    )
}

fn criterion_7() -> Verdict {
    let sys = fixture_system("pendulum_modulated.json");
    let opts = ChartOptions::default();
    let rhos: Vec<f64> = (0..9).map(|i| 1e2 * 10f64.powf(i as f64 / 4.0)).collect();
    let mut twist_pts = Vec::new();
    let mut action_pts = Vec::new();
    for &rho in &rhos {
        let (mut twist, mut action) = (0.0f64, 0.0f64);
        for k in 0..16 {
            let theta = 1.25 * k as f64;
            let next = poincare_map(&sys, PoincareState { theta, rho }, opts).unwrap();
            twist = twist.max((next.theta - theta - 2.0 * PI * (2.0 * rho).powf(-0.5)).abs());
            action = action.max((next.rho - rho).abs());
        }
        twist_pts.push((rho.ln(), twist.ln()));
        action_pts.push((rho.ln(), action.ln()));
    }
    let (te, ae) = (slope(&twist_pts), slope(&action_pts));

    let free = fixture_system("pendulum_free.json");
    let mut closed: f64 = 0.0;
    for &rho in &[1e2, 1e3, 1e4] {
        for &theta in &[0.0, 3.3, 71.0] {
            let next = poincare_map(&free, PoincareState { theta, rho }, opts).unwrap();
            closed = closed
                .max((next.theta - theta - 2.0 * PI * (2.0 * rho).powf(-0.5)).abs())
                .max((next.rho - rho).abs());
        }
    }
    verdict(
        (te + 1.5).abs() <= 0.25 && (ae + 0.5).abs() <= 0.25 && closed < 1e-9,
        format!(
            "twist exponent {te:.3} (-1.5 +- 0.25), action exponent {ae:.3} (-0.5 +- 0.25), integrable deviation {closed:.2e} (< 1e-9)"
        ),
    )
}

fn criterion_8() -> Verdict {
    let forced = fixture_system("pendulum_mean_forced.json");
    let tr = integrate_ivp(&forced, 0.0, 50.0, (0.0, 200.0), 1e-10, Some(0.05)).unwrap();
    let pts: Vec<(f64, f64)> = tr.t.iter().zip(&tr.y).map(|(&t, &y)| (t, y)).collect();
    let rate = slope(&pts);

    let zero_mean = fixture_system("pendulum_single_mode.json");
    let tr = integrate_ivp(&zero_mean, 0.0, 50.0, (0.0, 1000.0), 1e-10, Some(0.05)).unwrap();
    let excursion = tr.y.iter().map(|y| (y - 50.0).abs()).fold(0.0, f64::max);
    verdict(
        rate >= 0.45 && excursion <= 2.0,
        format!("growth rate {rate:.4} with p* = 1 (>= 0.45), max |y - y0| {excursion:.3} with p* = 0 (<= 2)"),
    )
}

fn criterion_9() -> Verdict {
    let mut manifests: Vec<PathBuf> = std::fs::read_dir(fixtures().join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path().join("manifest.json"))
        .filter(|p| p.exists())
        .collect();
    manifests.sort();
    let mut failures = Vec::new();
    for m in &manifests {
        let manifest = apkam::cli::RunManifest::load(m).unwrap();
        // The bundled outputs must be the ones the manifest recorded.
        if !manifest.mismatches(m.parent().unwrap()).is_empty() {
            failures.push(format!("{} (bundled)", m.display()));
        }
        if let Err(e) = apkam::cli::replay(m, None) {
            failures.push(format!("{}: {e}", m.display()));
        }
    }
    verdict(
        !manifests.is_empty() && failures.is_empty(),
        format!("{} manifests replayed, failures: {failures:?}", manifests.len()),
    )
}

#[test]
fn acceptance() {
    let criteria: [(u32, &str, fn() -> Verdict, Option<u64>); 9] = [
        (1, "homological solver exactness", criterion_1, Some(10)),
        (2, "norm algebra", criterion_2, Some(30)),
        (3, "composition and inversion round trip", criterion_3, Some(60)),
        (4, "KAM end to end on the fixture", criterion_4, Some(300)),
        (5, "contraction exponent", criterion_5, None),
        (6, "Diophantine sampler", criterion_6, Some(60)),
        (7, "return map asymptotics", criterion_7, Some(120)),
        (8, "boundedness dichotomy", criterion_8, Some(180)),
        (9, "manifest replay", criterion_9, None),
    ];
    let mut failed = Vec::new();
    for (n, name, run, limit) in criteria {
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_time = limit.is_none_or(|s| elapsed <= Duration::from_secs(s));
        let pass = v.pass && in_time;
        let budget = limit.map_or(String::new(), |s| format!(" of {s}s"));
        // Straight to the handle so the lines survive output capture.
        let _ = writeln!(
            std::io::stderr(),
            "criterion {n} [{}] {name}: {}; {:.2}s{budget}",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64()
        );
        if !pass {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
