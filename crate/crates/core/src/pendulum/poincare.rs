use std::f64::consts::{PI, SQRT_2};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gbs::{Gbs, State};
use super::{forcing_primitives, Breakdown, ForcingPrimitives, PendulumSystem};
use crate::apseries::ipow;
use crate::error::{Error, Result};

/// Point `(theta, rho)` on the section `u = 0 mod 2 pi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoincareState {
    pub theta: f64,
    pub rho: f64,
}

/// Scaled coordinates with `delta mu = (2 rho)^(-1/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmallTwistState {
    pub theta: f64,
    pub mu: f64,
    pub delta: f64,
}

/// Places `state` at the midpoint of `[a, b]`: `mu = (a + b) / 2` and
/// `delta = (2 rho)^(-1/2) / mu`.
pub fn small_twist_chart(state: PoincareState, a: f64, b: f64) -> SmallTwistState {
    let mu = 0.5 * (a + b);
    SmallTwistState {
        theta: state.theta,
        mu,
        delta: 1.0 / ((2.0 * state.rho).sqrt() * mu),
    }
}

pub fn from_small_twist(s: SmallTwistState) -> PoincareState {
    let dm = s.delta * s.mu;
    PoincareState {
        theta: s.theta,
        rho: 0.5 / (dm * dm),
    }
}

/// `mu` of `rho` at fixed `delta`.
pub fn scaled_action(rho: f64, delta: f64) -> f64 {
    1.0 / ((2.0 * rho).sqrt() * delta)
}

/// `rho` of `mu` at fixed `delta`.
pub fn action_from_scaled(mu: f64, delta: f64) -> f64 {
    let dm = delta * mu;
    0.5 / (dm * dm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChartOptions {
    /// Integrator tolerance.
    pub tol: f64,
    /// Required `h - sup |G| > energy_fraction h` along the return.
    pub energy_fraction: f64,
}

impl Default for ChartOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            energy_fraction: 0.5,
        }
    }
}

/// The return map to `u = 0 mod 2 pi` of the system with angle `u` as
/// time, written in the chart `theta = t + (2 rho)^(-1/2) int_0^t P`,
/// `h = rho + (2 rho)^(1/2) P(t)`.
pub struct PoincareChart<'a> {
    sys: &'a PendulumSystem,
    prim: ForcingPrimitives,
    opts: ChartOptions,
    g_sup: f64,
}

impl<'a> PoincareChart<'a> {
    pub fn new(sys: &'a PendulumSystem, opts: ChartOptions) -> Result<Self> {
        if !(opts.tol > 0.0 && opts.tol < 1.0) {
            return Err(Error::invalid("pendulum", format!("tolerance must lie in (0, 1), got {}", opts.tol)));
        }
        if !(opts.energy_fraction > 0.0 && opts.energy_fraction < 1.0) {
            return Err(Error::invalid("pendulum", "energy fraction must lie in (0, 1)"));
        }
        let prim = forcing_primitives(sys.forcing())?;
        if prim.p_star != 0.0 {
            return Err(Error::invalid(
                "pendulum",
                format!("the large-energy chart needs a zero-mean forcing, p* = {}", prim.p_star),
            ));
        }
        Ok(Self {
            g_sup: sys.g_sup_bound(),
            sys,
            prim,
            opts,
        })
    }

    pub fn primitives(&self) -> &ForcingPrimitives {
        &self.prim
    }

    /// Smallest `rho` for which both chart conditions hold with the
    /// coefficient bounds on `|P|` and `|G|`.
    pub fn validity_threshold(&self) -> f64 {
        let ps = self.prim.primitive_sup_bound();
        let gs = self.g_sup / (1.0 - self.opts.energy_fraction);
        let z = 0.5 * (SQRT_2 * ps + (2.0 * ps * ps + 4.0 * gs).sqrt());
        (z * z).max(2.0 * ps * ps)
    }

    /// `t` with `t + (2 rho)^(-1/2) int_0^t P = theta`, by Newton's method
    /// on the increasing left-hand side.
    pub fn time_from_angle(&self, theta: f64, rho: f64) -> Result<f64> {
        let kappa = 1.0 / (2.0 * rho).sqrt();
        let mut t = theta;
        for _ in 0..100 {
            let (big_p, int_p) = self.prim.eval(t);
            let slope = 1.0 + kappa * big_p;
            if !(slope > 0.5) {
                return Err(Error::ChartBreakdown(format!(
                    "1 + (2 rho)^(-1/2) P(t) = {slope} is not above 1/2 at t = {t}, rho = {rho}"
                )));
            }
            let step = (t + kappa * int_p - theta) / slope;
            t -= step;
            if step.abs() <= 1e-15 * (1.0 + t.abs()) {
                return Ok(t);
            }
        }
        Err(Error::ChartBreakdown(format!("angle {theta} could not be inverted at rho = {rho}")))
    }

    /// `(theta, rho)` of the point `(t, h)`.
    pub fn chart_of(&self, t: f64, h: f64) -> Result<PoincareState> {
        let (big_p, int_p) = self.prim.eval(t);
        let root = -big_p / SQRT_2 + (0.5 * big_p * big_p + h).sqrt();
        if !(root > 0.0) {
            return Err(Error::ChartBreakdown(format!("no positive action for h = {h:e} at t = {t}")));
        }
        let rho = root * root;
        let kappa = 1.0 / (2.0 * rho).sqrt();
        if !(1.0 + kappa * big_p > 0.5) {
            return Err(Error::ChartBreakdown(format!("chart not invertible at t = {t}, rho = {rho}")));
        }
        Ok(PoincareState {
            theta: t + kappa * int_p,
            rho,
        })
    }

    /// `(t, h)` of the point `(theta, rho)`.
    pub fn time_energy(&self, s: PoincareState) -> Result<(f64, f64)> {
        let t = self.time_from_angle(s.theta, s.rho)?;
        let h = s.rho + (2.0 * s.rho).sqrt() * self.prim.eval(t).0;
        Ok((t, h))
    }

    /// One return to the section.
    pub fn map(&self, s: PoincareState) -> Result<PoincareState> {
        if !(s.rho.is_finite() && s.theta.is_finite()) || !(s.rho > self.validity_threshold()) {
            return Err(Error::ChartBreakdown(format!(
                "rho = {} is below the validity threshold {:e}",
                s.rho,
                self.validity_threshold()
            )));
        }
        let (t0, h0) = self.time_energy(s)?;
        let breakdown = Breakdown::default();
        let rhs = |u: f64, s: &State| {
            let (t, h) = (s[0], s[1]);
            let g = self.sys.g_value(t, u);
            let w = h - g.g;
            if !(w > 0.0) {
                breakdown.raise(format!("h - G = {w:e} is not positive at u = {u}"));
                return [0.0, 0.0];
            }
            let rate = 1.0 / (2.0 * w).sqrt();
            [rate, self.sys.p_value(t) + rate * g.g_t]
        };
        let fraction = self.opts.energy_fraction;
        let check = |u: f64, s: &State| {
            let h = s[1];
            if !(h - self.g_sup > fraction * h) {
                breakdown.raise(format!("energy {h:e} too low against sup |G| = {:e} at u = {u}", self.g_sup));
            }
            !breakdown.raised()
        };
        let mut gbs = Gbs::new(rhs, self.opts.tol);
        let (mut u, mut end) = (0.0, [t0, h0]);
        let res = gbs.advance(&mut u, &mut end, 2.0 * PI, check);
        if let Some(msg) = breakdown.take() {
            return Err(Error::ChartBreakdown(msg));
        }
        res?;
        self.chart_of(end[0], end[1])
    }

    /// `(theta_k, rho_k)` for `k = 0..=iters`.
    pub fn orbit(&self, s: PoincareState, iters: usize) -> Result<Vec<PoincareState>> {
        let mut out = Vec::with_capacity(iters + 1);
        out.push(s);
        let mut cur = s;
        for _ in 0..iters {
            cur = self.map(cur)?;
            out.push(cur);
        }
        Ok(out)
    }
}

/// One return of `state` with a chart built for this call.
pub fn poincare_map(sys: &PendulumSystem, state: PoincareState, opts: ChartOptions) -> Result<PoincareState> {
    PoincareChart::new(sys, opts)?.map(state)
}

/// Columns `k,theta,rho`.
pub fn section_csv(orbit: &[PoincareState]) -> String {
    let mut out = String::from("k,theta,rho\n");
    for (k, s) in orbit.iter().enumerate() {
        out.push_str(&format!("{k},{:e},{:e}\n", s.theta, s.rho));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AsymptoticRow {
    pub rho: f64,
    /// `max |theta_1 - theta - 2 pi (2 rho)^(-1/2)|` over the sampled angles.
    pub twist_defect: f64,
    /// `max |rho_1 - rho|` over the sampled angles.
    pub action_increment: f64,
}

/// Power laws `defect ~ K rho^b` fitted in log-log coordinates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsymptoticFit {
    pub rows: Vec<AsymptoticRow>,
    pub twist_exponent: f64,
    pub action_exponent: f64,
    /// `max twist_defect rho^(3/2)` over the rows.
    pub twist_constant: f64,
    /// `max action_increment rho^(1/2)` over the rows.
    pub action_constant: f64,
}

fn log_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0.ln()).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0.ln() - mx) * (p.1.ln() - my)).sum();
    let sxx: f64 = pts.iter().map(|p| ipow(p.0.ln() - mx, 2)).sum();
    sxy / sxx
}

/// Measures the deviation of the return map from the rigid twist
/// `theta -> theta + 2 pi (2 rho)^(-1/2)` on a grid of actions and angles.
pub fn asymptotic_fit(chart: &PoincareChart<'_>, rhos: &[f64], thetas: &[f64]) -> Result<AsymptoticFit> {
    if rhos.len() < 2 || thetas.is_empty() {
        return Err(Error::invalid("pendulum", "the fit needs at least two actions and one angle"));
    }
    let rows = rhos
        .par_iter()
        .map(|&rho| {
            let twist = 2.0 * PI / (2.0 * rho).sqrt();
            let mut row = AsymptoticRow {
                rho,
                twist_defect: 0.0,
                action_increment: 0.0,
            };
            for &theta in thetas {
                let next = chart.map(PoincareState { theta, rho })?;
                row.twist_defect = row.twist_defect.max((next.theta - theta - twist).abs());
                row.action_increment = row.action_increment.max((next.rho - rho).abs());
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let tw: Vec<(f64, f64)> = rows.iter().map(|r| (r.rho, r.twist_defect)).collect();
    let ac: Vec<(f64, f64)> = rows.iter().map(|r| (r.rho, r.action_increment)).collect();
    Ok(AsymptoticFit {
        twist_exponent: log_slope(&tw),
        action_exponent: log_slope(&ac),
        twist_constant: rows.iter().map(|r| r.twist_defect * r.rho.powf(1.5)).fold(0.0, f64::max),
        action_constant: rows.iter().map(|r| r.action_increment * r.rho.sqrt()).fold(0.0, f64::max),
        rows,
    })
}

/// Logarithmically spaced values from `a` to `b`.
pub fn log_grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n)
            .map(|k| (a.ln() + (b.ln() - a.ln()) * k as f64 / (n - 1) as f64).exp())
            .collect(),
    }
}
