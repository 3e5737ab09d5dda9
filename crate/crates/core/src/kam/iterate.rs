use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::verify::max_defect;
use super::{kam_step, perturbation_size, KamSchedule, Mode, StepEstimates};
use crate::apseries::{ipow, ApSeries, Basis, SeriesWire, Window};
use crate::error::{Error, Result};
use crate::twistmap::TwistMap;

/// Quasi-uniform sample count used for the per-stage residual.
pub const DEFAULT_SAMPLES: usize = 4096;

/// Ratio by which the practical schedule shrinks `s` at least.
const PRACTICAL_S_RATIO: f64 = 3.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterateOptions {
    pub mode: Mode,
    pub tol_conj: f64,
    pub samples: usize,
}

impl IterateOptions {
    pub fn practical(tol_conj: f64) -> Self {
        Self {
            mode: Mode::Practical,
            tol_conj,
            samples: DEFAULT_SAMPLES,
        }
    }

    pub fn paper() -> Self {
        Self {
            mode: Mode::Paper,
            tol_conj: 0.0,
            samples: DEFAULT_SAMPLES,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub r_n: f64,
    pub s_n: f64,
    /// `||f_n|| + ||g_n||` on `(r_n, s_n)`.
    pub eps_measured: f64,
    /// Predicted bound on the next perturbation size.
    pub q_bound: f64,
    /// Conjugacy residual of the curve after this stage.
    pub residual: f64,
    pub estimates: StepEstimates,
}

/// The curve `x = xi + u(xi)`, `y = v(xi)` on which the map acts as
/// `xi -> xi + alpha`.
#[derive(Debug, Clone)]
pub struct InvariantCurve {
    pub u: ApSeries,
    pub v: ApSeries,
    pub alpha: f64,
    pub conjugacy_residual: f64,
    /// `||u||_(r0/2) + ||v - alpha||_(r0/2)`.
    pub norm_bound: f64,
    pub stage_log: Vec<StageRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveWire {
    pub alpha: f64,
    pub conjugacy_residual: f64,
    pub norm_bound: f64,
    pub u: SeriesWire,
    pub v: SeriesWire,
    #[serde(default, skip_deserializing)]
    pub stage_log: Vec<StageRecord>,
}

impl InvariantCurve {
    /// The unperturbed curve `u = 0`, `v = alpha`.
    pub fn trivial(basis: &Arc<Basis>) -> Self {
        Self {
            u: ApSeries::zero(basis, 0),
            v: ApSeries::constant(basis, 0, basis.alpha()),
            alpha: basis.alpha(),
            conjugacy_residual: 0.0,
            norm_bound: 0.0,
            stage_log: Vec::new(),
        }
    }

    pub fn to_wire(&self) -> CurveWire {
        CurveWire {
            alpha: self.alpha,
            conjugacy_residual: self.conjugacy_residual,
            norm_bound: self.norm_bound,
            u: self.u.to_wire(),
            v: self.v.to_wire(),
            stage_log: self.stage_log.clone(),
        }
    }

    pub fn from_wire(basis: &Arc<Basis>, wire: &CurveWire) -> Result<Self> {
        let u = ApSeries::from_wire(basis, &wire.u)?;
        let v = ApSeries::from_wire(basis, &wire.v)?;
        if u.degree_cap() != 0 || v.degree_cap() != 0 {
            return Err(Error::invalid("kam", "curve series must not depend on the action"));
        }
        Ok(Self {
            u,
            v,
            alpha: wire.alpha,
            conjugacy_residual: wire.conjugacy_residual,
            norm_bound: wire.norm_bound,
            stage_log: Vec::new(),
        })
    }

    /// `stage, r_n, s_n, eps_measured, Q_bound, residual`, one row per stage.
    pub fn stage_csv(&self) -> String {
        let mut out = String::from("stage,r_n,s_n,eps_measured,Q_bound,residual\n");
        for s in &self.stage_log {
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:e}\n",
                s.stage, s.r_n, s.s_n, s.eps_measured, s.q_bound, s.residual
            ));
        }
        out
    }
}

fn curve_from(p: &ApSeries, q: &ApSeries, r0: f64) -> (ApSeries, ApSeries, f64) {
    let u = p.restrict_y(0.0);
    let dv = q.restrict_y(0.0);
    let norm = u.norm_r(r0 / 2.0) + dv.norm_r(r0 / 2.0);
    (u, dv.add_constant(p.basis().alpha()), norm)
}

/// Runs KAM steps on `map` until the curve obtained from the accumulated
/// transforms is invariant to `tol_conj` (practical mode) or the schedule
/// reaches `max_stage` (paper mode).
pub fn kam_iterate(map: &TwistMap, schedule: &KamSchedule, opts: &IterateOptions) -> Result<InvariantCurve> {
    schedule.validate()?;
    if !(schedule.r0 <= map.window.r && schedule.s0 <= map.window.s) {
        return Err(Error::invalid(
            "kam",
            format!(
                "schedule window ({}, {}) exceeds the map window ({}, {})",
                schedule.r0, schedule.s0, map.window.r, map.window.s
            ),
        ));
    }
    if opts.mode == Mode::Practical && !(opts.tol_conj > 0.0) {
        return Err(Error::invalid("kam", "practical mode needs a positive tolerance"));
    }
    let basis = map.basis().clone();
    let cap = map.f.degree_cap();
    let mut window = Window::new(schedule.r0, schedule.s0)?;
    let eps_start = perturbation_size(&map.f, &map.g, window);
    if opts.mode == Mode::Paper && eps_start > schedule.eps0 {
        return Err(Error::ConditionViolation {
            condition: "eps0".into(),
            lhs: eps_start,
            rhs: schedule.eps0,
        });
    }

    let mut curve = InvariantCurve::trivial(&basis);
    curve.conjugacy_residual = max_defect(&curve.u, &curve.v, map, opts.samples);
    if eps_start == 0.0 || (opts.mode == Mode::Practical && curve.conjugacy_residual < opts.tol_conj) {
        return Ok(curve);
    }

    let mut f = map.f.clone();
    let mut g = map.g.clone();
    let mut p = ApSeries::zero(&basis, cap);
    let mut q = ApSeries::zero(&basis, cap);
    let mut last_residual = curve.conjugacy_residual;
    for n in 0..schedule.max_stage {
        let eps = perturbation_size(&f, &g, window);
        let s_next = match opts.mode {
            Mode::Paper => {
                let bound = schedule.eps(n);
                if eps > bound {
                    return Err(Error::ConditionViolation {
                        condition: format!("eps_{n}"),
                        lhs: eps,
                        rhs: bound,
                    });
                }
                schedule.s(n + 1)
            }
            Mode::Practical => {
                let shrunk = window.s / PRACTICAL_S_RATIO;
                if eps > 0.0 {
                    shrunk.min(eps.powf(2.0 / 3.0))
                } else {
                    shrunk
                }
            }
        };
        let target = Window::new(schedule.r(n + 1), s_next)?;
        debug_assert!(target.r > schedule.r0 / 2.0 && target.s < window.s);
        let step = match kam_step(&f, &g, window, target, &schedule.constants, opts.mode) {
            Ok(step) => step,
            Err(e) if opts.mode == Mode::Practical && breaks_down(&e) => {
                return Err(no_convergence(&curve, opts.tol_conj, format!("step {n} failed: {e}")));
            }
            Err(e) => return Err(e),
        };

        let (u, v) = (&step.transform.u, &step.transform.v);
        p = u.add(&p.compose(u, v, target)?)?;
        q = v.add(&q.compose(u, v, target)?)?;
        let (cu, cv, norm) = curve_from(&p, &q, schedule.r0);
        curve.u = cu;
        curve.v = cv;
        curve.norm_bound = norm;
        curve.conjugacy_residual = max_defect(&curve.u, &curve.v, map, opts.samples);
        curve.stage_log.push(StageRecord {
            stage: n,
            r_n: window.r,
            s_n: window.s,
            eps_measured: eps,
            q_bound: step.estimates.q_bound,
            residual: curve.conjugacy_residual,
            estimates: step.estimates,
        });
        f = step.f_plus;
        g = step.g_plus;
        window = target;

        if opts.mode == Mode::Practical {
            if curve.conjugacy_residual < opts.tol_conj {
                return Ok(curve);
            }
            if !(curve.conjugacy_residual < last_residual) {
                return Err(no_convergence(&curve, opts.tol_conj, "residual stopped decreasing".into()));
            }
            last_residual = curve.conjugacy_residual;
        }
    }
    match opts.mode {
        Mode::Practical => Err(no_convergence(&curve, opts.tol_conj, "stage limit reached".into())),
        Mode::Paper => {
            let bound = 4.0 * schedule.eps0.powf(1.0 / 9.0);
            if !(curve.norm_bound <= bound) {
                return Err(Error::ConditionViolation {
                    condition: "curve_bound".into(),
                    lhs: curve.norm_bound,
                    rhs: bound,
                });
            }
            Ok(curve)
        }
    }
}

/// Step failures that signal the perturbation is too large for the scheme.
fn breaks_down(e: &Error) -> bool {
    matches!(
        e,
        Error::ResidualCheck { .. } | Error::ContractionFailure { .. } | Error::CompositionDomain { .. }
    )
}

fn no_convergence(curve: &InvariantCurve, tol: f64, reason: String) -> Error {
    Error::NoConvergence {
        stages: curve.stage_log.len(),
        residual: curve.conjugacy_residual,
        tol,
        reason,
        residuals: curve.stage_log.iter().map(|s| s.residual).collect(),
    }
}

/// Least-squares fit of `ln eps_(n+1) = ln C + b ln eps_n` over the steps
/// of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractionFit {
    pub exponent: f64,
    pub log_c: f64,
    pub points: usize,
}

pub fn fit_contraction(log: &[StageRecord]) -> Option<ContractionFit> {
    let pts: Vec<(f64, f64)> = log
        .iter()
        .map(|s| (s.estimates.eps_in, s.estimates.eps_out))
        .filter(|&(a, b)| a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite())
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    match pts.len() {
        0 => None,
        // A single step fixes the exponent only with C = 1.
        1 => Some(ContractionFit {
            exponent: pts[0].1 / pts[0].0,
            log_c: 0.0,
            points: 1,
        }),
        n => {
            let nf = n as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
            let sxx: f64 = pts.iter().map(|p| ipow(p.0 - mx, 2)).sum();
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            if sxx == 0.0 {
                return None;
            }
            let b = sxy / sxx;
            Some(ContractionFit {
                exponent: b,
                log_c: my - b * mx,
                points: n,
            })
        }
    }
}
