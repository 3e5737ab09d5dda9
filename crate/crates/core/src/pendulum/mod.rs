//! Forced pendulum-type equations `x'' + G_x(t, x) = p(t)` with almost
//! periodic time dependence: simulation, the large-energy Poincaré map and
//! the boundedness experiments.

mod fit;
mod gbs;
mod poincare;

use std::cell::Cell;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apseries::{ipow, ApSeries, Basis, SeriesWire};
use crate::error::{Error, Result};
use crate::numeric::sin_cos;
use crate::frequency::FrequencyContext;
use crate::multiindex::MultiIndex;
use gbs::{Gbs, State};

pub use fit::{fit_poincare_map, FitOptions, FitReport, FittedMap};
pub use poincare::{
    action_from_scaled, asymptotic_fit, from_small_twist, log_grid, poincare_map, scaled_action, section_csv,
    small_twist_chart, AsymptoticFit, AsymptoticRow, ChartOptions, PoincareChart, PoincareState, SmallTwistState,
};

/// Smallest `|(omega, l)|` accepted when integrating a forcing mode.
pub const PRIMITIVE_DIVISOR_FLOOR: f64 = 1e-10;
/// Allowed shortfall of the fitted growth rate below `p* / 2`.
pub const GROWTH_FIT_TOL: f64 = 0.05;

/// A real function of `t` alone, `Re sum c_l e^(i (omega, l) t)` with one
/// representative of every conjugate pair.
#[derive(Debug, Clone, Default)]
struct Trig {
    terms: Vec<(f64, Complex64)>,
}

impl Trig {
    fn new(s: &ApSeries) -> Self {
        let basis = s.basis();
        let mut terms = Vec::new();
        for (pos, block) in s.blocks() {
            let c = block[0];
            let l = basis.index(pos);
            if l.is_zero() {
                terms.push((0.0, c));
            } else if basis.position(&l.negate()).is_none_or(|neg| pos < neg) {
                terms.push((basis.frequency(pos), 2.0 * c));
            }
        }
        Self { terms }
    }

    /// Value and derivative at `t`.
    fn eval(&self, t: f64) -> (f64, f64) {
        let mut v = 0.0;
        let mut d = 0.0;
        for &(w, c) in &self.terms {
            let (s, co) = sin_cos(w * t);
            v += c.re * co - c.im * s;
            d -= w * (c.re * s + c.im * co);
        }
        (v, d)
    }

    fn sup_bound(&self) -> f64 {
        self.terms.iter().map(|(_, c)| c.norm()).sum()
    }
}

/// One harmonic `C_k(t) cos(k x) + S_k(t) sin(k x)` of `G`.
#[derive(Debug, Clone)]
pub struct GMode {
    pub k: u32,
    pub cos: ApSeries,
    pub sin: ApSeries,
}

/// `G(t, x)` as a finite Fourier series in `x` with almost periodic
/// coefficients in `t`, and the forcing `p(t)`.
#[derive(Debug, Clone)]
pub struct PendulumSystem {
    basis: Arc<Basis>,
    g: Vec<GMode>,
    p: ApSeries,
    g_fast: Vec<(f64, Trig, Trig)>,
    p_fast: Trig,
}

/// Values of `G` and its partial derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GValue {
    pub g: f64,
    pub g_x: f64,
    pub g_t: f64,
}

impl PendulumSystem {
    pub fn new(basis: &Arc<Basis>, g: Vec<GMode>, p: ApSeries) -> Result<Self> {
        for s in g.iter().flat_map(|m| [&m.cos, &m.sin]).chain([&p]) {
            if !Arc::ptr_eq(s.basis(), basis) {
                return Err(Error::ContextMismatch);
            }
            if s.degree_cap() != 0 || !s.is_real() {
                return Err(Error::invalid("pendulum", "coefficients must be real series in t alone (degree cap 0)"));
            }
        }
        if g.iter().any(|m| m.k == 0) {
            return Err(Error::invalid("pendulum", "harmonic numbers of G must be positive"));
        }
        let g_fast = g.iter().map(|m| (m.k as f64, Trig::new(&m.cos), Trig::new(&m.sin))).collect();
        let p_fast = Trig::new(&p);
        Ok(Self {
            basis: basis.clone(),
            g,
            p,
            g_fast,
            p_fast,
        })
    }

    /// `G = -cos x (1 + sum_n a_n cos((omega, l_n) t))` with forcing `p`.
    pub fn modulated_pendulum(basis: &Arc<Basis>, modulation: &[(MultiIndex, f64)], p: ApSeries) -> Result<Self> {
        let trig: Vec<(MultiIndex, f64, f64)> = modulation.iter().map(|(l, a)| (l.clone(), -a, 0.0)).collect();
        let cos = ApSeries::trig_sum(basis, 0, &trig)?.add_constant(-1.0);
        let mode = GMode {
            k: 1,
            cos,
            sin: ApSeries::zero(basis, 0),
        };
        Self::new(basis, vec![mode], p)
    }

    pub fn basis(&self) -> &Arc<Basis> {
        &self.basis
    }

    pub fn g_modes(&self) -> &[GMode] {
        &self.g
    }

    pub fn forcing(&self) -> &ApSeries {
        &self.p
    }

    pub fn g_value(&self, t: f64, x: f64) -> GValue {
        let mut out = GValue { g: 0.0, g_x: 0.0, g_t: 0.0 };
        for (k, c, s) in &self.g_fast {
            let (sx, cx) = sin_cos(k * x);
            let (cv, cd) = c.eval(t);
            let (sv, sd) = s.eval(t);
            out.g += cv * cx + sv * sx;
            out.g_x += k * (sv * cx - cv * sx);
            out.g_t += cd * cx + sd * sx;
        }
        out
    }

    pub fn p_value(&self, t: f64) -> f64 {
        self.p_fast.eval(t).0
    }

    /// Upper bound on `sup |G|` from the coefficient sums.
    pub fn g_sup_bound(&self) -> f64 {
        self.g_fast.iter().map(|(_, c, s)| c.sup_bound() + s.sup_bound()).sum()
    }

    /// `y^2 / 2 + G(t, x)`, conserved when `p = 0` and `G` is autonomous.
    pub fn energy(&self, t: f64, x: f64, y: f64) -> f64 {
        0.5 * y * y + self.g_value(t, x).g
    }

    pub fn to_wire(&self) -> SystemWire {
        SystemWire {
            g: GWire {
                fourier_x: self
                    .g
                    .iter()
                    .map(|m| GModeWire {
                        k: m.k,
                        cos: m.cos.to_wire(),
                        sin: Some(m.sin.to_wire()),
                    })
                    .collect(),
            },
            p: self.p.to_wire(),
            ctx: self.basis.context().clone(),
        }
    }

    /// Builds the system from its JSON form. A context without rotation
    /// number is centered at the midpoint of its interval; the series here
    /// do not depend on the action, so the center is immaterial.
    pub fn from_wire(wire: &SystemWire) -> Result<Self> {
        let ctx = match wire.ctx.alpha {
            Some(_) => wire.ctx.clone(),
            None => wire.ctx.with_alpha(0.5 * (wire.ctx.interval.0 + wire.ctx.interval.1)),
        };
        let basis = Basis::new(ctx)?;
        let g = wire
            .g
            .fourier_x
            .iter()
            .map(|m| {
                Ok(GMode {
                    k: m.k,
                    cos: ApSeries::from_wire(&basis, &m.cos)?,
                    sin: match &m.sin {
                        Some(s) => ApSeries::from_wire(&basis, s)?,
                        None => ApSeries::zero(&basis, 0),
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let p = ApSeries::from_wire(&basis, &wire.p)?;
        Self::new(&basis, g, p)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GModeWire {
    pub k: u32,
    pub cos: SeriesWire,
    #[serde(default)]
    pub sin: Option<SeriesWire>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GWire {
    pub fourier_x: Vec<GModeWire>,
}

/// JSON form `{G: {fourier_x: [...]}, p, ctx}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemWire {
    #[serde(rename = "G")]
    pub g: GWire,
    pub p: SeriesWire,
    pub ctx: FrequencyContext,
}

/// Mean of the forcing and its zero-mean primitives.
#[derive(Debug, Clone)]
pub struct ForcingPrimitives {
    /// Mean value `p*` of `p`.
    pub p_star: f64,
    /// `P(t) = int_0^t (p - p*) + C`, the primitive with zero mean.
    pub primitive: ApSeries,
    /// `C = P(0)`.
    pub c: f64,
    /// Zero-mean primitive of `P`.
    pub int_primitive: ApSeries,
    p_fast: Trig,
    int_fast: Trig,
}

impl ForcingPrimitives {
    /// `(P(t), int P(t))`.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        (self.p_fast.eval(t).0, self.int_fast.eval(t).0)
    }

    /// Upper bound on `sup |P|`.
    pub fn primitive_sup_bound(&self) -> f64 {
        self.p_fast.sup_bound()
    }
}

/// Zero-mean primitive: `c_l -> c_l / (i (omega, l))` for `l != 0`.
fn antiderivative(s: &ApSeries) -> Result<ApSeries> {
    let basis = s.basis();
    let mut terms = Vec::new();
    for (pos, block) in s.blocks() {
        let l = basis.index(pos);
        if l.is_zero() {
            continue;
        }
        let w = basis.frequency(pos);
        if !(w.abs() >= PRIMITIVE_DIVISOR_FLOOR) {
            return Err(Error::SmallDivisorBreakdown {
                module: "pendulum",
                index: l.to_string(),
                divisor: w.abs(),
                floor: PRIMITIVE_DIVISOR_FLOOR,
            });
        }
        terms.push((l.clone(), vec![block[0] / Complex64::new(0.0, w)]));
    }
    ApSeries::from_terms(basis, 0, s.is_real(), terms)
}

pub fn forcing_primitives(p: &ApSeries) -> Result<ForcingPrimitives> {
    if p.degree_cap() != 0 {
        return Err(Error::invalid("pendulum", "forcing must be a series in t alone"));
    }
    let p_star = p.mean()[0].re;
    let primitive = antiderivative(p)?;
    let int_primitive = antiderivative(&primitive)?;
    let c = primitive.evaluate_real(0.0, 0.0);
    Ok(ForcingPrimitives {
        p_star,
        p_fast: Trig::new(&primitive),
        int_fast: Trig::new(&int_primitive),
        primitive,
        c,
        int_primitive,
    })
}

/// Samples `(t, x, y)` of a solution.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn last(&self) -> Option<(f64, f64, f64)> {
        let n = self.t.len().checked_sub(1)?;
        Some((self.t[n], self.x[n], self.y[n]))
    }

    /// Columns `t,x,y`.
    pub fn csv(&self) -> String {
        let mut out = String::from("t,x,y\n");
        for i in 0..self.t.len() {
            out.push_str(&format!("{:e},{:e},{:e}\n", self.t[i], self.x[i], self.y[i]));
        }
        out
    }
}

/// Adaptive extrapolation integration of `x' = y`, `y' = -G_x(t, x) + p(t)`
/// with relative and absolute tolerance `tol` per step. With `sample_step`
/// the solution is reported on an even grid of spacing at most
/// `sample_step`; otherwise at every accepted step.
pub fn integrate_ivp(
    sys: &PendulumSystem,
    x0: f64,
    y0: f64,
    t_span: (f64, f64),
    tol: f64,
    sample_step: Option<f64>,
) -> Result<Trajectory> {
    let (t0, t1) = t_span;
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::invalid("pendulum", format!("tolerance must lie in (0, 1), got {tol}")));
    }
    if !(t0.is_finite() && t1.is_finite() && t1 > t0) || !(x0.is_finite() && y0.is_finite()) {
        return Err(Error::invalid("pendulum", "time span and initial values must be finite with t1 > t0"));
    }
    let rhs = |t: f64, s: &State| [s[1], -sys.g_value(t, s[0]).g_x + sys.p_value(t)];
    let mut gbs = Gbs::new(rhs, tol);
    let (mut t, mut s) = (t0, [x0, y0]);
    let mut traj = Trajectory::default();
    let mut push = |t: f64, s: &State| {
        traj.t.push(t);
        traj.x.push(s[0]);
        traj.y.push(s[1]);
        true
    };
    push(t, &s);
    match sample_step {
        Some(h) if h > 0.0 => {
            let n = ((t1 - t0) / h).ceil().max(1.0) as usize;
            for k in 1..=n {
                let te = if k == n { t1 } else { t0 + (t1 - t0) * k as f64 / n as f64 };
                gbs.advance(&mut t, &mut s, te, |_, _| true)?;
                push(t, &s);
            }
        }
        Some(h) => return Err(Error::invalid("pendulum", format!("sample step must be positive, got {h}"))),
        None => {
            gbs.advance(&mut t, &mut s, t1, &mut push)?;
        }
    }
    Ok(traj)
}

/// Outcome of one initial condition of the boundedness experiment.
#[derive(Debug, Clone, Serialize)]
pub struct BoundednessRecord {
    pub y0: f64,
    pub t_max: f64,
    pub max_abs_y: f64,
    /// `max |y(t) - y0|`.
    pub max_excursion: f64,
    /// Least-squares slope of `y` against `t`.
    pub growth_rate: f64,
    pub p_star: f64,
    /// Whether the growth rate reaches `p*/2 - GROWTH_FIT_TOL`; only set
    /// when `p* != 0`.
    pub rate_bound_holds: Option<bool>,
}

impl BoundednessRecord {
    pub fn csv_header() -> &'static str {
        "y0,t_max,max_abs_y,max_excursion,growth_rate,p_star,rate_bound_holds"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:e},{:e},{:e},{:e},{:e},{:e},{}",
            self.y0,
            self.t_max,
            self.max_abs_y,
            self.max_excursion,
            self.growth_rate,
            self.p_star,
            self.rate_bound_holds.map_or("".to_string(), |b| b.to_string())
        )
    }
}

fn slope(t: &[f64], y: &[f64]) -> f64 {
    let n = t.len() as f64;
    let mt = t.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = t.iter().zip(y).map(|(a, b)| (a - mt) * (b - my)).sum();
    let sxx: f64 = t.iter().map(|a| ipow(a - mt, 2)).sum();
    sxy / sxx
}

/// Integrates `x(0) = 0`, `y(0) = y0` over `[0, t_max]` for every `y0`.
pub fn boundedness_experiment(
    sys: &PendulumSystem,
    y0_grid: &[f64],
    t_max: f64,
    tol: f64,
) -> Result<Vec<BoundednessRecord>> {
    if !(t_max > 0.0 && t_max.is_finite()) {
        return Err(Error::invalid("pendulum", format!("t_max must be finite and positive, got {t_max}")));
    }
    let p_star = sys.p.mean()[0].re;
    let step = t_max / 4000.0;
    y0_grid
        .par_iter()
        .map(|&y0| {
            let tr = integrate_ivp(sys, 0.0, y0, (0.0, t_max), tol, Some(step))?;
            let max_abs_y = tr.y.iter().fold(0.0f64, |m, y| m.max(y.abs()));
            let max_excursion = tr.y.iter().fold(0.0f64, |m, y| m.max((y - y0).abs()));
            let growth_rate = slope(&tr.t, &tr.y);
            let rate_bound_holds = (p_star != 0.0).then_some(growth_rate >= 0.5 * p_star - GROWTH_FIT_TOL);
            Ok(BoundednessRecord {
                y0,
                t_max,
                max_abs_y,
                max_excursion,
                growth_rate,
                p_star,
                rate_bound_holds,
            })
        })
        .collect()
}

/// Shared flag set from inside an integration when a chart leaves its
/// domain of validity.
#[derive(Default)]
pub(crate) struct Breakdown(Cell<Option<String>>);

impl Breakdown {
    pub(crate) fn raise(&self, msg: String) {
        let cur = self.0.take();
        self.0.set(Some(cur.unwrap_or(msg)));
    }

    pub(crate) fn raised(&self) -> bool {
        let cur = self.0.take();
        let raised = cur.is_some();
        self.0.set(cur);
        raised
    }

    pub(crate) fn take(&self) -> Option<String> {
        self.0.take()
    }
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;

    #[test]
    fn primitives_of_single_modes() {
        let b = basis();
        let w1 = b.context().omega[0];
        let p = cos_mode(&b, 1, 1.0);
        let fp = forcing_primitives(&p).unwrap();
        assert_eq!(fp.p_star, 0.0);
        for k in 0..20 {
            let t = 0.37 * k as f64 - 2.0;
            let (big_p, int_p) = fp.eval(t);
            assert!((big_p - (w1 * t).sin() / w1).abs() < 1e-14);
            assert!((int_p + (w1 * t).cos() / (w1 * w1)).abs() < 1e-13);
        }
        assert_eq!(fp.c, 0.0);

        let c = forcing_primitives(&ApSeries::constant(&b, 0, 2.5)).unwrap();
        assert_eq!(c.p_star, 2.5);
        assert!(c.primitive.is_zero());
    }

    #[test]
    fn primitive_differentiates_back() {
        let b = basis();
        let p = ApSeries::trig_sum(
            &b,
            0,
            &[
                (MultiIndex::unit(1, 1), 0.7, 0.3),
                (MultiIndex::from_dense(&[1, -1, 0]), 0.2, -1.0),
                (MultiIndex::unit(3, 2), 0.1, 2.0),
            ],
        )
        .unwrap()
        .add_constant(0.4);
        let fp = forcing_primitives(&p).unwrap();
        assert!((fp.p_star - 0.4).abs() < 1e-15);
        assert!(fp.primitive.mean()[0].norm() == 0.0 && fp.int_primitive.mean()[0].norm() == 0.0);
        // Fourth-order central differences, then the exact derivative.
        let h = 1e-3;
        for k in 0..20 {
            let t = 1.3 * k as f64;
            let f = |s: f64| fp.eval(s).0;
            let d = (8.0 * (f(t + h) - f(t - h)) - (f(t + 2.0 * h) - f(t - 2.0 * h))) / (12.0 * h);
            assert!((d - (p.evaluate_real(t, 0.0) - fp.p_star)).abs() < 1e-9);
            let derived = fp.primitive.dx().evaluate_real(t, 0.0);
            assert!((derived - (p.evaluate_real(t, 0.0) - fp.p_star)).abs() < 1e-12);
        }
    }

    #[test]
    fn free_particle_and_linear_forcing() {
        let b = basis();
        let tr = integrate_ivp(&free(&b), 0.0, 1.0, (0.0, 50.0), 1e-12, None).unwrap();
        for (t, x) in tr.t.iter().zip(&tr.x) {
            assert!((x - t).abs() < 1e-10);
        }

        // x'' = a cos(w t), x(0) = 0, x'(0) = 1.
        let w = b.context().omega[1];
        let sys = PendulumSystem::new(&b, vec![], cos_mode(&b, 2, 0.8)).unwrap();
        let tr = integrate_ivp(&sys, 0.0, 1.0, (0.0, 100.0), 1e-12, Some(0.5)).unwrap();
        assert_eq!(tr.len(), 201);
        for i in 0..tr.len() {
            let t = tr.t[i];
            let exact = t + 0.8 * (1.0 - (w * t).cos()) / (w * w);
            assert!((tr.x[i] - exact).abs() < 1e-9, "t = {t}: {} vs {exact}", tr.x[i]);
            assert!((tr.y[i] - 1.0 - 0.8 * (w * t).sin() / w).abs() < 1e-9);
        }
    }

    #[test]
    fn pendulum_energy_is_conserved() {
        let b = basis();
        let sys = PendulumSystem::modulated_pendulum(&b, &[], ApSeries::zero(&b, 0)).unwrap();
        assert_eq!(sys.g_value(0.3, 0.0).g, -1.0);
        let tr = integrate_ivp(&sys, 0.0, 1.5, (0.0, 1000.0), 1e-11, None).unwrap();
        let e0 = sys.energy(0.0, 0.0, 1.5);
        let drift = tr
            .t
            .iter()
            .zip(tr.x.iter().zip(&tr.y))
            .map(|(&t, (&x, &y))| (sys.energy(t, x, y) - e0).abs())
            .fold(0.0, f64::max);
        assert!(drift < 1e-9, "energy drift {drift:e}");
    }

    #[test]
    fn g_derivatives_match_differences() {
        let b = basis();
        let sys = PendulumSystem::new(
            &b,
            vec![
                GMode {
                    k: 1,
                    cos: cos_mode(&b, 1, 0.3).add_constant(-1.0),
                    sin: cos_mode(&b, 2, 0.2),
                },
                GMode {
                    k: 3,
                    cos: ApSeries::zero(&b, 0),
                    sin: cos_mode(&b, 3, 0.1),
                },
            ],
            ApSeries::zero(&b, 0),
        )
        .unwrap();
        let h = 1e-5;
        for k in 0..10 {
            let (t, x) = (0.9 * k as f64, 0.4 * k as f64 - 1.0);
            let v = sys.g_value(t, x);
            let gx = (sys.g_value(t, x + h).g - sys.g_value(t, x - h).g) / (2.0 * h);
            let gt = (sys.g_value(t + h, x).g - sys.g_value(t - h, x).g) / (2.0 * h);
            assert!((v.g_x - gx).abs() < 1e-9 && (v.g_t - gt).abs() < 1e-9);
            assert!(v.g.abs() <= sys.g_sup_bound());
        }
    }

    #[test]
    fn system_round_trips_through_json() {
        let b = basis();
        let sys = PendulumSystem::modulated_pendulum(&b, &[(MultiIndex::unit(2, 1), 0.1)], cos_mode(&b, 1, 0.5)).unwrap();
        let json = serde_json::to_string(&sys.to_wire()).unwrap();
        assert!(json.contains("\"G\":{\"fourier_x\""));
        let back = PendulumSystem::from_wire(&serde_json::from_str(&json).unwrap()).unwrap();
        for k in 0..5 {
            let t = 1.7 * k as f64;
            assert_eq!(back.g_value(t, 0.3), sys.g_value(t, 0.3));
            assert_eq!(back.p_value(t), sys.p_value(t));
        }
    }
}
