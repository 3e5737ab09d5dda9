use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::poincare::{action_from_scaled, scaled_action};
use super::{ChartOptions, PendulumSystem, PoincareChart, PoincareState};
use crate::apseries::{ipow, ApSeries, Basis, Window};
use crate::error::{Error, Result};
use crate::numeric::sin_cos;
use crate::multiindex::MultiIndex;
use crate::twistmap::{SmallTwistMap, TwistMap};

/// Sampling and model choices for fitting the return map in scaled
/// coordinates `(theta, mu)`, `delta mu = (2 rho)^(-1/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub delta: f64,
    /// Range `[a, b]` of the scaled action.
    pub mu_range: (f64, f64),
    pub theta_range: (f64, f64),
    pub n_theta: usize,
    pub n_mu: usize,
    /// Taylor degree in `mu - (a + b) / 2`.
    pub degree: usize,
    /// Largest weight of the fitted Fourier modes.
    pub max_weight: u32,
    /// Strip width of the output map window.
    pub r: f64,
    pub chart: ChartOptions,
}

impl FitOptions {
    /// Options with `mu in [1, 2]` centered on the action `rho`.
    pub fn around(rho: f64) -> Self {
        Self {
            delta: scaled_action(rho, 1.5),
            mu_range: (1.0, 2.0),
            theta_range: (0.0, 200.0),
            n_theta: 256,
            n_mu: 5,
            degree: 2,
            max_weight: 4,
            r: 0.5,
            chart: ChartOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub samples: usize,
    pub unknowns: usize,
    /// Largest sample misfit of either component.
    pub residual_max: f64,
    pub residual_rms: f64,
    /// `||f|| + ||g||` of the fitted perturbation on its window.
    pub perturbation_norm: f64,
    /// Whether the misfit stays below the size of the fitted perturbation.
    pub within_budget: bool,
    /// Twist coefficient `2 pi delta` of the fitted map.
    pub twist: f64,
}

#[derive(Debug, Clone)]
pub struct FittedMap {
    pub map: SmallTwistMap,
    pub report: FitReport,
}

/// Least-squares fit of the return map to
/// `theta1 = theta + 2 pi delta mu + f(theta, mu)`, `mu1 = mu + g(theta, mu)`
/// with `f`, `g` real series over the lattice modes of weight at most
/// `max_weight`, centered at the midpoint of the action range.
pub fn fit_poincare_map(sys: &PendulumSystem, opts: &FitOptions) -> Result<FittedMap> {
    let (a, b) = opts.mu_range;
    let twist = 2.0 * PI * opts.delta;
    if !(a > 0.0 && a < b) || !(opts.delta > 0.0 && twist <= 1.0) {
        return Err(Error::invalid(
            "pendulum",
            "fit needs 0 < a < b and 0 < 2 pi delta <= 1",
        ));
    }
    if opts.n_theta == 0 || opts.n_mu == 0 || !(opts.theta_range.0 < opts.theta_range.1) {
        return Err(Error::invalid("pendulum", "fit needs a non-empty sample grid"));
    }
    let chart = PoincareChart::new(sys, opts.chart)?;
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let basis = Basis::new(sys.basis().context().with_alpha(center))?;

    // One representative of every conjugate pair, zero mode first.
    let modes: Vec<usize> = (0..basis.len())
        .filter(|&pos| {
            let l = basis.index(pos);
            basis.weight(pos) <= opts.max_weight
                && (l.is_zero() || basis.position(&l.negate()).is_some_and(|neg| pos < neg))
        })
        .collect();
    let cols_per_power: usize = modes.iter().map(|&p| if p == 0 { 1 } else { 2 }).sum();
    let unknowns = cols_per_power * (opts.degree + 1);

    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (t0, t1) = opts.theta_range;
    let grid: Vec<(f64, f64)> = (0..opts.n_mu)
        .flat_map(|i| {
            let mu = if opts.n_mu == 1 {
                center
            } else {
                center - half * (PI * (i as f64 + 0.5) / opts.n_mu as f64).cos()
            };
            (0..opts.n_theta).map(move |k| (t0 + (t1 - t0) * ((k + i * opts.n_theta) as f64 * phi).fract(), mu))
        })
        .collect();
    let samples: Vec<(f64, f64, f64, f64)> = grid
        .par_iter()
        .map(|&(theta, mu)| {
            let rho = action_from_scaled(mu, opts.delta);
            let next = chart.map(PoincareState { theta, rho })?;
            let mu1 = scaled_action(next.rho, opts.delta);
            Ok((theta, mu, next.theta - theta - twist * mu, mu1 - mu))
        })
        .collect::<Result<Vec<_>>>()?;
    if samples.len() < unknowns {
        return Err(Error::invalid(
            "pendulum",
            format!("{} samples cannot determine {unknowns} unknowns", samples.len()),
        ));
    }

    let row = |theta: f64, mu: f64| -> Vec<f64> {
        let z = (mu - center) / half;
        let mut out = Vec::with_capacity(unknowns);
        let mut zj = 1.0;
        for _ in 0..=opts.degree {
            for &pos in &modes {
                if pos == 0 {
                    out.push(zj);
                } else {
                    let (s, c) = sin_cos(basis.frequency(pos) * theta);
                    out.push(zj * c);
                    out.push(zj * s);
                }
            }
            zj *= z;
        }
        out
    };
    let mut a_mat = DMatrix::zeros(samples.len(), unknowns);
    for (i, &(theta, mu, _, _)) in samples.iter().enumerate() {
        for (j, v) in row(theta, mu).into_iter().enumerate() {
            a_mat[(i, j)] = v;
        }
    }
    let rhs = DMatrix::from_fn(samples.len(), 2, |i, j| if j == 0 { samples[i].2 } else { samples[i].3 });
    let svd = a_mat.clone().svd(true, true);
    let eps = 1e-13 * svd.singular_values.max();
    let sol = svd
        .solve(&rhs, eps)
        .map_err(|e| Error::invalid("pendulum", format!("least-squares solve failed: {e}")))?;
    let misfit = &a_mat * &sol - &rhs;
    let residual_max = misfit.amax();
    let residual_rms = (misfit.norm_squared() / misfit.len() as f64).sqrt();

    // cos, sin coefficients (A, B) of z^j become c_l = (A - i B) / 2 on the
    // powers of (mu - center).
    let series = |col: usize| -> Result<ApSeries> {
        let coeffs: DVector<f64> = sol.column(col).into();
        let mut terms: Vec<(MultiIndex, Vec<Complex64>)> = Vec::new();
        let mut k = 0;
        let mut polys: Vec<Vec<Complex64>> = vec![vec![Complex64::new(0.0, 0.0); opts.degree + 1]; modes.len()];
        for j in 0..=opts.degree {
            let scale = ipow(half, -(j as i32));
            for (m, &pos) in modes.iter().enumerate() {
                if pos == 0 {
                    polys[m][j] = Complex64::new(coeffs[k] * scale, 0.0);
                    k += 1;
                } else {
                    polys[m][j] = Complex64::new(coeffs[k], -coeffs[k + 1]) * (0.5 * scale);
                    k += 2;
                }
            }
        }
        for (m, &pos) in modes.iter().enumerate() {
            let l = basis.index(pos).clone();
            if pos != 0 {
                terms.push((l.negate(), polys[m].iter().map(|c| c.conj()).collect()));
            }
            terms.push((l, polys[m].clone()));
        }
        ApSeries::from_terms(&basis, opts.degree, true, terms)
    };
    let f = series(0)?;
    let g = series(1)?;
    let window = Window::new(opts.r, half)?;
    let perturbation_norm = f.norm(window) + g.norm(window);
    let base = TwistMap::new(f, g, (a, b), window)?;
    let map = SmallTwistMap::new(base, twist)?;
    Ok(FittedMap {
        map,
        report: FitReport {
            samples: samples.len(),
            unknowns,
            residual_max,
            residual_rms,
            perturbation_norm,
            within_budget: residual_max < perturbation_norm,
            twist,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;
    use super::*;

    #[test]
    fn fitted_map_reproduces_fresh_samples() {
        let b = basis();
        let sys = PendulumSystem::modulated_pendulum(&b, &[(MultiIndex::unit(2, 1), 0.1)], cos_mode(&b, 1, 0.5)).unwrap();
        let mut opts = FitOptions::around(2e3);
        opts.n_theta = 200;
        let fit = fit_poincare_map(&sys, &opts).unwrap();
        assert!(fit.report.within_budget, "{:?}", fit.report);
        let chart = PoincareChart::new(&sys, opts.chart).unwrap();
        for &(theta, mu) in &[(13.7, 1.3), (101.1, 1.8), (57.0, 1.5)] {
            let rho = action_from_scaled(mu, opts.delta);
            let next = chart.map(PoincareState { theta, rho }).unwrap();
            let (x1, y1) = fit.map.apply(theta, mu);
            assert!((x1 - next.theta).abs() < 10.0 * fit.report.residual_max.max(1e-12));
            assert!((y1 - scaled_action(next.rho, opts.delta)).abs() < 10.0 * fit.report.residual_max.max(1e-12));
        }
    }

    #[test]
    fn integrable_case_fits_to_a_pure_twist() {
        let b = basis();
        let sys = free(&b);
        let fit = fit_poincare_map(&sys, &FitOptions::around(1e3)).unwrap();
        assert!(fit.report.residual_max < 1e-10);
        assert!(fit.report.perturbation_norm < 1e-9);
    }
}
