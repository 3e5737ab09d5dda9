use rayon::prelude::*;
use serde::Serialize;

use super::InvariantCurve;
use crate::apseries::ApSeries;
use crate::twistmap::TwistMap;

/// Length of the interval sampled by the conjugacy check.
pub const SAMPLE_SPAN: f64 = 1000.0;

/// `xi_k = frac(k Phi) L` for `k = 0..n`, `Phi` the golden ratio.
pub fn sample_points(n: usize) -> Vec<f64> {
    let phi = 0.5 * (1.0 + 5f64.sqrt());
    (0..n).map(|k| (k as f64 * phi).fract() * SAMPLE_SPAN).collect()
}

/// The two defects of the conjugacy equations at `xi`:
/// `u + v + f(xi + u, v) - alpha - u(xi + alpha)` and
/// `v + g(xi + u, v) - v(xi + alpha)`.
pub fn conjugacy_defects(u: &ApSeries, v: &ApSeries, map: &TwistMap, xi: f64) -> (f64, f64) {
    let alpha = map.alpha();
    let uk = u.evaluate_real(xi, 0.0);
    let vk = v.evaluate_real(xi, 0.0);
    let x = xi + uk;
    let e1 = uk + vk + map.f.evaluate_real(x, vk) - alpha - u.evaluate_real(xi + alpha, 0.0);
    let e2 = vk + map.g.evaluate_real(x, vk) - v.evaluate_real(xi + alpha, 0.0);
    (e1, e2)
}

/// Largest conjugacy defect over `n_samples` quasi-uniform points.
pub fn verify_conjugacy(curve: &InvariantCurve, map: &TwistMap, n_samples: usize) -> f64 {
    max_defect(&curve.u, &curve.v, map, n_samples)
}

pub(super) fn max_defect(u: &ApSeries, v: &ApSeries, map: &TwistMap, n_samples: usize) -> f64 {
    sample_points(n_samples)
        .par_iter()
        .map(|&xi| {
            let (e1, e2) = conjugacy_defects(u, v, map, xi);
            e1.abs().max(e2.abs())
        })
        .reduce(|| 0.0, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct ShadowReport {
    pub seeds: usize,
    pub iterates: usize,
    /// Largest distance between an orbit and its predicted point.
    pub max_deviation: f64,
    /// Largest `|x_n - x_0 - n alpha - (u(xi_0 + n alpha) - u(xi_0))|`.
    pub rotation_defect: f64,
    /// Largest deviation among the first `10^k` iterates, `k = 0, 1, ...`.
    pub deviation_by_decade: Vec<f64>,
}

/// Iterates the map from points of the curve and compares each orbit
/// with the rigid rotation `xi -> xi + alpha` on the curve.
pub fn orbit_shadow_check(curve: &InvariantCurve, map: &TwistMap, x0_count: usize, n_iterates: usize) -> ShadowReport {
    let alpha = map.alpha();
    let seeds = sample_points(x0_count + 1).split_off(1);
    let per_seed: Vec<(Vec<f64>, f64)> = seeds
        .par_iter()
        .map(|&xi0| {
            let mut dev = Vec::with_capacity(n_iterates);
            let mut rot: f64 = 0.0;
            let mut p = (xi0 + curve.u.evaluate_real(xi0, 0.0), curve.v.evaluate_real(xi0, 0.0));
            for k in 1..=n_iterates {
                p = map.apply(p.0, p.1);
                let xi = xi0 + k as f64 * alpha;
                let dx = p.0 - (xi + curve.u.evaluate_real(xi, 0.0));
                let dy = p.1 - curve.v.evaluate_real(xi, 0.0);
                rot = rot.max(dx.abs());
                dev.push(dx.hypot(dy));
            }
            (dev, rot)
        })
        .collect();
    let mut by_step = vec![0.0f64; n_iterates];
    let mut rotation_defect: f64 = 0.0;
    for (dev, rot) in &per_seed {
        for (b, d) in by_step.iter_mut().zip(dev) {
            *b = b.max(*d);
        }
        rotation_defect = rotation_defect.max(*rot);
    }
    let mut deviation_by_decade = Vec::new();
    let mut running: f64 = 0.0;
    let mut next = 1;
    for (k, d) in by_step.iter().enumerate() {
        running = running.max(*d);
        if k + 1 == next {
            deviation_by_decade.push(running);
            next *= 10;
        }
    }
    ShadowReport {
        seeds: seeds.len(),
        iterates: n_iterates,
        max_deviation: running,
        rotation_defect,
        deviation_by_decade,
    }
}
