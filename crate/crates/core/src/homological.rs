//! The difference equation `s(x + alpha) - s(x) = h(x)` and the coupled
//! system solved at every KAM step.
//!
//! Mode by mode the solution is `s_l = h_l / (e^{i (omega, l) alpha} - 1)`;
//! the equation is solvable exactly when `h` has zero mean.

use num_complex::Complex64;
use serde::Serialize;

use crate::apseries::{poly_disk_bound, unit_difference, ApSeries, Window};
use crate::error::{Error, Result};

pub const DEFAULT_DIVISOR_FLOOR: f64 = 1e-14;

/// Relative size below which a mean counts as zero.
const MEAN_TOLERANCE: f64 = 1e-14;

/// Relative residual every solve must meet.
const RESIDUAL_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub divisor_floor: f64,
    /// Window the right-hand side is measured in.
    pub window: Window,
    /// Strip width of the solution norm; `window.r - r_prime` is the loss
    /// entering the a-priori bound.
    pub r_prime: f64,
}

impl SolveOptions {
    pub fn new(window: Window, r_prime: f64) -> Result<Self> {
        if !(r_prime > 0.0 && r_prime < window.r) {
            return Err(Error::invalid(
                "homological",
                format!("need 0 < r' < r, got r = {}, r' = {r_prime}", window.r),
            ));
        }
        Ok(Self {
            divisor_floor: DEFAULT_DIVISOR_FLOOR,
            window,
            r_prime,
        })
    }

    fn target(&self) -> Window {
        Window {
            r: self.r_prime,
            s: self.window.s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HomologicalReport {
    /// `||s||` in the window `(r', s)`.
    pub solution_norm: f64,
    /// `||h||` in the window `(r, s)`.
    pub rhs_norm: f64,
    /// Smallest `|e^{i (omega, l) alpha} - 1|` over the modes of `h`.
    pub min_divisor: f64,
    /// `||h|| e^{1/(r - r')^2} / gamma`.
    pub a_priori_bound: f64,
    pub divisor_floor: f64,
    /// `||s(x + alpha) - s - h|| / ||h||`.
    pub relative_residual: f64,
}

impl HomologicalReport {
    pub fn within_bound(&self) -> bool {
        self.solution_norm <= self.a_priori_bound
    }
}

/// Solves `s(x + alpha) - s(x) = h(x)` with `[s] = 0`.
pub fn solve_difference(h: &ApSeries, opts: &SolveOptions) -> Result<(ApSeries, HomologicalReport)> {
    let basis = h.basis();
    let alpha = basis.alpha();
    let h_norm = h.norm(opts.window);
    let mean_size: f64 = h.mean().iter().map(|c| c.norm()).sum();
    if mean_size > MEAN_TOLERANCE * h_norm.max(f64::MIN_POSITIVE) {
        return Err(Error::MeanNotZero { mean: mean_size });
    }

    let mut s = h.without_mean();
    s.clear_truncation();
    let mut min_divisor = f64::INFINITY;
    let active: Vec<usize> = s.blocks().map(|(pos, _)| pos).collect();
    for pos in active {
        let d = unit_difference(basis.frequency(pos) * alpha);
        let m = d.norm();
        if m < opts.divisor_floor {
            return Err(Error::SmallDivisorBreakdown {
                module: "homological",
                index: basis.index(pos).to_string(),
                divisor: m,
                floor: opts.divisor_floor,
            });
        }
        min_divisor = min_divisor.min(m);
        let inv: Complex64 = d.inv();
        s.block_mut(pos).iter_mut().for_each(|c| *c *= inv);
    }

    let residual = s.difference(alpha).sub(&h.without_mean())?.norm(opts.window);
    let relative_residual = if h_norm > 0.0 { residual / h_norm } else { residual };
    if relative_residual > RESIDUAL_TOLERANCE {
        return Err(Error::ResidualCheck {
            module: "homological",
            residual: relative_residual,
            tol: RESIDUAL_TOLERANCE,
        });
    }

    let delta = opts.window.r - opts.r_prime;
    let gamma = basis.context().params.gamma;
    let report = HomologicalReport {
        solution_norm: s.norm(opts.target()),
        rhs_norm: h_norm,
        min_divisor,
        a_priori_bound: h_norm / gamma * (1.0 / (delta * delta)).exp(),
        divisor_floor: opts.divisor_floor,
        relative_residual,
    };
    Ok((s, report))
}

/// Solution of `u(x + alpha) - u = v + f`, `v(x + alpha) - v = g - [g]`
/// with the mean of `v` fixed to `-[f]`.
#[derive(Debug, Clone)]
pub struct ModifiedSolution {
    pub u: ApSeries,
    pub v: ApSeries,
    /// `[v]`, a polynomial in `y - alpha`.
    pub mean_v: Vec<Complex64>,
    pub report_u: HomologicalReport,
    pub report_v: HomologicalReport,
}

pub fn solve_modified_system(f: &ApSeries, g: &ApSeries, opts: &SolveOptions) -> Result<ModifiedSolution> {
    let (v_tilde, report_v) = solve_difference(&g.without_mean(), opts)?;
    let mean_f = f.mean();
    let mut v = v_tilde;
    for (c, m) in v.block_mut(0).iter_mut().zip(&mean_f) {
        *c = -m;
    }
    // [v + f] = -[f] + [f] vanishes exactly.
    let p = v.add(f)?;
    let (u, report_u) = solve_difference(&p, opts)?;
    let mean_v = v.mean();
    debug_assert!(
        poly_disk_bound(&mean_v, opts.window.s) <= f.norm(opts.window) * (1.0 + 1e-12) + f64::MIN_POSITIVE
    );
    Ok(ModifiedSolution {
        u,
        v,
        mean_v,
        report_u,
        report_v,
    })
}
