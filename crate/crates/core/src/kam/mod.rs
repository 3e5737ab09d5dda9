//! KAM step and iteration producing invariant curves of twist maps.

mod iterate;
mod step;
mod verify;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::apseries::{ipow, ApSeries, Window};
use crate::error::{Error, Result};

pub use iterate::{
    fit_contraction, kam_iterate, ContractionFit, CurveWire, InvariantCurve, IterateOptions, StageRecord, DEFAULT_SAMPLES,
};
pub use step::{kam_step, KamTransform, StepOutcome};
pub use verify::{conjugacy_defects, orbit_shadow_check, sample_points, verify_conjugacy, ShadowReport, SAMPLE_SPAN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Follow the schedule exactly; any violated hypothesis is an error.
    Paper,
    /// Residual-driven stopping; violated hypotheses are only recorded.
    Practical,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Mode::Paper),
            "practical" => Ok(Mode::Practical),
            other => Err(Error::invalid("kam", format!("unknown mode {other:?}"))),
        }
    }
}

/// The constants `c1..c7` of the step estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KamConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub c6: f64,
    pub c7: f64,
}

impl Default for KamConstants {
    fn default() -> Self {
        Self {
            c1: 1.0,
            c2: 1.0,
            c3: 2.0,
            c4: 1.0,
            c5: 4.0,
            c6: 4.0,
            c7: 2.0,
        }
    }
}

/// Upper limit on `s` standing in for `s << 1`.
pub const SMALL_S: f64 = 0.1;

/// Domain and size schedule: `delta_n = 3 r0 / (pi^2 n^2)`,
/// `r_n = r0 - sum_{k <= n} delta_k`, `s_n = eps_n^(2/3)` and
/// `eps_(n+1) = c7^((n+1)^4) eps_n^(4/3)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KamSchedule {
    pub r0: f64,
    pub s0: f64,
    pub eps0: f64,
    pub constants: KamConstants,
    pub max_stage: usize,
}

impl KamSchedule {
    pub fn new(r0: f64, eps0: f64, max_stage: usize) -> Result<Self> {
        let s = Self {
            r0,
            s0: eps0.powf(2.0 / 3.0),
            eps0,
            constants: KamConstants::default(),
            max_stage,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r0 > 0.0 && self.r0 <= 1.0) {
            return Err(Error::invalid("kam", format!("r0 must lie in (0, 1], got {}", self.r0)));
        }
        if !(self.s0 > 0.0 && self.s0 <= 1.0) {
            return Err(Error::invalid("kam", format!("s0 must lie in (0, 1], got {}", self.s0)));
        }
        if !(self.eps0 >= 0.0 && self.eps0.is_finite()) {
            return Err(Error::invalid("kam", format!("eps0 must be finite and non-negative, got {}", self.eps0)));
        }
        let c = &self.constants;
        if [c.c1, c.c2, c.c3, c.c4, c.c5, c.c6, c.c7].iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::invalid("kam", "constants c1..c7 must be positive"));
        }
        Ok(())
    }

    /// `delta_n` for `n >= 1`.
    pub fn delta(&self, n: usize) -> f64 {
        assert!(n >= 1);
        3.0 * self.r0 / (PI * PI * (n * n) as f64)
    }

    pub fn r(&self, n: usize) -> f64 {
        self.r0 - (1..=n).map(|k| self.delta(k)).sum::<f64>()
    }

    /// `eps_n` from the recursion, evaluated in logarithms.
    pub fn eps(&self, n: usize) -> f64 {
        // exp(ln eps0) is not always eps0.
        if n == 0 {
            return self.eps0;
        }
        self.log_eps(n).exp()
    }

    fn log_eps(&self, n: usize) -> f64 {
        let mut l = self.eps0.ln();
        for k in 1..=n {
            l = ipow(k as f64, 4) * self.constants.c7.ln() + 4.0 / 3.0 * l;
        }
        l
    }

    pub fn s(&self, n: usize) -> f64 {
        if n == 0 {
            self.s0
        } else {
            (2.0 / 3.0 * self.log_eps(n)).exp()
        }
    }

    pub fn window(&self, n: usize) -> Result<Window> {
        Window::new(self.r(n), self.s(n))
    }
}

/// One inequality `lhs < rhs` with both sides evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl Condition {
    fn less(name: &str, lhs: f64, rhs: f64) -> Self {
        Self {
            name: name.to_string(),
            lhs,
            rhs,
            holds: lhs < rhs,
        }
    }

    fn at_most(name: &str, lhs: f64, rhs: f64) -> Self {
        Self {
            name: name.to_string(),
            lhs,
            rhs,
            holds: lhs <= rhs,
        }
    }

    fn violation(&self) -> Error {
        Error::ConditionViolation {
            condition: self.name.clone(),
            lhs: self.lhs,
            rhs: self.rhs,
        }
    }
}

/// Estimates of one step from `(r, s)` to `(r+, s+)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEstimates {
    pub r: f64,
    pub s: f64,
    pub r_plus: f64,
    pub s_plus: f64,
    /// `||f|| + ||g||` on `(r, s)`.
    pub eps_in: f64,
    /// `||f+|| + ||g+||` on `(r+, s+)`.
    pub eps_out: f64,
    pub delta: f64,
    pub rho: f64,
    /// `c3 / delta^2`, the logarithm of the loss factor `E`.
    pub log_loss: f64,
    /// `E eps`.
    pub loss_eps: f64,
    /// `c6 {e^(c5/delta^2) (eps^2/s + s eps) + (s+/s)^2 eps}`.
    pub q_bound: f64,
    pub rough: f64,
    pub rough_tilde: f64,
    /// Hypotheses of the step: smallness, contraction and series (a)-(d).
    pub conditions: Vec<Condition>,
    /// Intermediate inequalities checked against the computed series.
    pub cross_checks: Vec<Condition>,
    /// `sup |h|` over `|eta - alpha| <= s+` for
    /// `h(eta) = [g](alpha) + [g]_eta(alpha) (eta - alpha)`.
    pub h_sup: f64,
    /// Whether `g+` changes sign along every probed horizontal line.
    pub g_plus_root: bool,
    pub fixed_point_iterations: usize,
    /// Largest pointwise defect of the conjugacy identity of the step.
    pub identity_defect: f64,
}

impl StepEstimates {
    /// Evaluates the step hypotheses for input size `eps`.
    pub fn hypotheses(eps: f64, window: Window, target: Window, c: &KamConstants) -> Self {
        let (r, s) = (window.r, window.s);
        let (rp, sp) = (target.r, target.s);
        let delta = r - rp;
        let rho = s - sp;
        let log_loss = c.c3 / (delta * delta);
        let loss_eps = scaled_exp(log_loss, eps);
        let q_bound = c.c6 * (scaled_exp(c.c5 / (delta * delta), eps * eps / s + s * eps) + ipow(sp / s, 2) * eps);
        let rough = 2.0 * eps * (loss_eps + (sp + loss_eps) / s).exp() + 2.0 * loss_eps;
        let rough_tilde = rough + 2.0 * loss_eps * (rough + (2.0 * sp + rough) / (s - rho / 2.0)).exp();
        let contraction = loss_eps / rho * (2.0 * loss_eps + (s - rho / 2.0 + 2.0 * loss_eps) / (s - rho / 4.0)).exp();
        let conditions = vec![
            Condition::less("smallness", loss_eps, delta.min(rho) / 4.0),
            Condition::less("contraction", contraction, 0.5),
            Condition::less("series_a", sp, s / 3.0),
            Condition::less("series_b", rho, delta),
            Condition::less("series_c", loss_eps, s),
            Condition::less("series_c_scale", s, SMALL_S),
            Condition::less("series_d", eps + sp + rho / 4.0, delta / 4.0),
        ];
        Self {
            r,
            s,
            r_plus: rp,
            s_plus: sp,
            eps_in: eps,
            eps_out: f64::NAN,
            delta,
            rho,
            log_loss,
            loss_eps,
            q_bound,
            rough,
            rough_tilde,
            conditions,
            cross_checks: Vec::new(),
            h_sup: f64::NAN,
            g_plus_root: true,
            fixed_point_iterations: 0,
            identity_defect: 0.0,
        }
    }

    pub fn violations(&self) -> impl Iterator<Item = &Condition> {
        self.conditions.iter().filter(|c| !c.holds)
    }

    pub fn first_violation(&self) -> Option<Error> {
        self.violations().next().map(Condition::violation)
    }

    pub fn hypotheses_hold(&self) -> bool {
        self.conditions.iter().all(|c| c.holds)
    }
}

/// `e^a x` without forming `e^a` when it overflows.
fn scaled_exp(a: f64, x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        (a + x.ln()).exp()
    }
}

/// `||f|| + ||g||` in `window`.
pub fn perturbation_size(f: &ApSeries, g: &ApSeries, window: Window) -> f64 {
    f.norm(window) + g.norm(window)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_invariants() {
        let s = KamSchedule::new(1.0, 1e-6, 10).unwrap();
        let total: f64 = (1..200_000).map(|n| s.delta(n)).sum();
        assert!((total - 0.5).abs() < 1e-5);
        for n in 0..10 {
            assert!(s.r(n) > 0.5);
            assert!(s.r(n + 1) < s.r(n));
        }
        assert!((s.s(0) - 1e-4).abs() < 1e-18);
        assert_eq!(s.eps(0), 1e-6);
        let e1 = 2.0 * 1e-8;
        assert!((s.eps(1) - e1).abs() < 1e-20);
        assert!((s.s(1) - e1.powf(2.0 / 3.0)).abs() < 1e-15);
        let e2 = 2f64.powi(16) * e1.powf(4.0 / 3.0);
        assert!((s.eps(2) / e2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_validation() {
        assert!(KamSchedule::new(0.0, 1e-6, 3).is_err());
        assert!(KamSchedule::new(2.0, 1e-6, 3).is_err());
        assert!(KamSchedule::new(1.0, -1.0, 3).is_err());
    }

    #[test]
    fn hypotheses_record_both_sides() {
        let w = Window { r: 1.0, s: 1e-4 };
        let t = Window { r: 0.7, s: 1e-5 };
        let est = StepEstimates::hypotheses(1e-6, w, t, &KamConstants::default());
        assert_eq!(est.conditions.len(), 7);
        let a = &est.conditions[2];
        assert_eq!((a.lhs, a.rhs, a.holds), (1e-5, 1e-4 / 3.0, true));
        // e^(2/0.09) 1e-6 is about 4.5e3, far above s.
        let c = est.conditions.iter().find(|c| c.name == "series_c").unwrap();
        assert!(!c.holds);
        assert!((c.lhs - (2.0 / 0.09f64 + (1e-6f64).ln()).exp()).abs() < 1e-9 * c.lhs);
        assert!(matches!(est.first_violation(), Some(Error::ConditionViolation { .. })));

        let zero = StepEstimates::hypotheses(0.0, w, t, &KamConstants::default());
        assert_eq!(zero.loss_eps, 0.0);
        assert_eq!(zero.q_bound, 0.0);
    }
}
