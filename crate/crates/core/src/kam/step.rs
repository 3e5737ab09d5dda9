use super::{perturbation_size, Condition, KamConstants, Mode, StepEstimates};
use crate::apseries::{compose_checked, poly_disk_bound, ApSeries, Window};
use crate::error::{Error, Result};
use crate::homological::{solve_modified_system, SolveOptions};

const FIXED_POINT_TOL: f64 = 1e-13;
const FIXED_POINT_MAX_ITER: usize = 60;
const IDENTITY_TOL: f64 = 1e-9;
const IDENTITY_POINTS: usize = 20;
const ROOT_SAMPLES: usize = 2048;
/// Transform size beyond which practical mode abandons the step.
const PRACTICAL_SIZE_LIMIT: f64 = 1.0;

/// The change of variables `x = xi + u(xi, eta)`, `y = eta + v(xi, eta)`.
#[derive(Debug, Clone)]
pub struct KamTransform {
    pub u: ApSeries,
    pub v: ApSeries,
    /// Window on which the new map is defined.
    pub window: Window,
}

impl KamTransform {
    pub fn apply(&self, xi: f64, eta: f64) -> (f64, f64) {
        (xi + self.u.evaluate_real(xi, eta), eta + self.v.evaluate_real(xi, eta))
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub transform: KamTransform,
    pub f_plus: ApSeries,
    pub g_plus: ApSeries,
    pub estimates: StepEstimates,
}

/// One step taking the map `(f, g)` on `window` to `(f+, g+)` on `target`.
///
/// The new perturbation is the exact solution, within the truncated
/// representation, of
/// `f+ = u + v + f(xi + u, eta + v) - u(xi + eta + f+, eta + g+)`,
/// `g+ = v + g(xi + u, eta + v) - v(xi + eta + f+, eta + g+)`.
pub fn kam_step(
    f: &ApSeries,
    g: &ApSeries,
    window: Window,
    target: Window,
    constants: &KamConstants,
    mode: Mode,
) -> Result<StepOutcome> {
    f.add(g)?;
    if !(target.r < window.r && target.s < window.s) {
        return Err(Error::invalid(
            "kam",
            format!("target ({}, {}) must lie inside window ({}, {})", target.r, target.s, window.r, window.s),
        ));
    }
    let eps = perturbation_size(f, g, window);
    let mut est = StepEstimates::hypotheses(eps, window, target, constants);
    if mode == Mode::Paper {
        if let Some(err) = est.first_violation() {
            return Err(err);
        }
    }
    let basis = f.basis();
    let cap = f.degree_cap();
    let alpha = basis.alpha();
    let mean_g = g.mean();
    est.h_sup = mean_g.first().map_or(0.0, |c| c.norm()) + mean_g.get(1).map_or(0.0, |c| c.norm()) * target.s;

    if eps == 0.0 {
        est.eps_out = 0.0;
        let zero = ApSeries::zero(basis, cap);
        return Ok(StepOutcome {
            transform: KamTransform {
                u: zero.clone(),
                v: zero.clone(),
                window: target,
            },
            f_plus: zero.clone(),
            g_plus: zero,
            estimates: est,
        });
    }

    let delta = est.delta;
    let rho = est.rho;
    let opts = SolveOptions::new(window, window.r - delta / 8.0)?;
    let sol = solve_modified_system(f, g, &opts)?;
    let (u, v) = (sol.u, sol.v);

    let near = Window { r: window.r - delta / 8.0, s: window.s };
    let d1 = Window { r: window.r - delta / 4.0, s: window.s - rho / 4.0 };
    let loss = |c: f64| (c / (delta * delta)).exp();
    let p = v.add(f)?;
    est.cross_checks = vec![
        Condition::at_most("mean_v", poly_disk_bound(&sol.mean_v, window.s), f.norm(window)),
        Condition::at_most("p_bound", p.norm(Window { r: window.r - delta / 16.0, s: window.s }), loss(constants.c1) * eps),
        Condition::at_most("transform_bound", u.norm(near) + v.norm(near), loss(constants.c2) * eps),
        Condition::at_most("derivative_xi", u.dx().norm(d1) + v.dx().norm(d1), est.loss_eps),
        Condition::at_most("derivative_eta", u.dy().norm(d1) + v.dy().norm(d1), est.loss_eps / rho),
    ];

    // The domain guard protects the norm estimates; practical mode relies
    // on the identity check instead.
    let (fu, gu) = match mode {
        Mode::Paper => (
            compose_checked(f, &u, &v, window, target)?,
            compose_checked(g, &u, &v, window, target)?,
        ),
        Mode::Practical => {
            let size = u.norm(target) + v.norm(target);
            if !(size < PRACTICAL_SIZE_LIMIT) {
                return Err(Error::CompositionDomain {
                    size,
                    limit: PRACTICAL_SIZE_LIMIT,
                });
            }
            (f.compose(&u, &v, target)?, g.compose(&u, &v, target)?)
        }
    };
    let a = u.add(&v)?.add(&fu)?;
    let b = v.add(&gu)?;
    let u_sheared = u.twist_shear();
    let v_sheared = v.twist_shear();

    let scale = a.norm(target) + b.norm(target);
    let mut fp = a.sub(&u_sheared)?;
    let mut gp = b.sub(&v_sheared)?;
    let mut last = f64::INFINITY;
    let mut iterations = 0;
    loop {
        iterations += 1;
        if iterations > FIXED_POINT_MAX_ITER {
            return Err(Error::ContractionFailure {
                module: "kam",
                detail: format!("new perturbation did not settle in {FIXED_POINT_MAX_ITER} iterations"),
            });
        }
        let shift_x = fp.sub(&gp)?;
        let fn_ = a.sub(&u_sheared.compose(&shift_x, &gp, target)?)?;
        let gn = b.sub(&v_sheared.compose(&shift_x, &gp, target)?)?;
        let change = fn_.sub(&fp)?.norm(target) + gn.sub(&gp)?.norm(target);
        fp = fn_;
        gp = gn;
        if change <= FIXED_POINT_TOL * scale {
            break;
        }
        if change >= last {
            if change <= 1e3 * FIXED_POINT_TOL * scale {
                break;
            }
            return Err(Error::ContractionFailure {
                module: "kam",
                detail: format!("new perturbation iteration stalled at change {change:e}"),
            });
        }
        last = change;
    }
    est.fixed_point_iterations = iterations;
    est.eps_out = perturbation_size(&fp, &gp, target);
    est.cross_checks.push(Condition::at_most("q_bound", est.eps_out, est.q_bound));
    est.cross_checks.push(Condition::at_most("h_bound", est.h_sup, 3.0 * est.q_bound));

    let transform = KamTransform { u, v, window: target };
    est.identity_defect = identity_defect(f, g, &fp, &gp, &transform);
    if !(est.identity_defect <= IDENTITY_TOL) {
        return Err(Error::ResidualCheck {
            module: "kam",
            residual: est.identity_defect,
            tol: IDENTITY_TOL,
        });
    }
    est.g_plus_root = [-0.5, 0.0, 0.5].iter().all(|&t| has_root_on_line(&gp, alpha + t * target.s));

    Ok(StepOutcome {
        transform,
        f_plus: fp,
        g_plus: gp,
        estimates: est,
    })
}

/// Largest defect of `U o M+ = M o U` at quasi-uniform real points with
/// `|eta - alpha| <= s+ / 2`.
fn identity_defect(f: &ApSeries, g: &ApSeries, fp: &ApSeries, gp: &ApSeries, t: &KamTransform) -> f64 {
    let alpha = f.basis().alpha();
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    (1..=IDENTITY_POINTS)
        .map(|k| {
            let xi = (k as f64 * phi).fract() * 100.0;
            let eta = alpha + t.window.s * ((k as f64 * std::f64::consts::SQRT_2).fract() - 0.5);
            let xi1 = xi + eta + fp.evaluate_real(xi, eta);
            let eta1 = eta + gp.evaluate_real(xi, eta);
            let lhs = t.apply(xi1, eta1);
            let (x, y) = t.apply(xi, eta);
            let rhs = (x + y + f.evaluate_real(x, y), y + g.evaluate_real(x, y));
            (lhs.0 - rhs.0).abs().max((lhs.1 - rhs.1).abs())
        })
        .fold(0.0, f64::max)
}

/// Whether `xi -> g(xi, eta)` changes sign on a sample of `[0, 1000]`.
fn has_root_on_line(g: &ApSeries, eta: f64) -> bool {
    if g.is_zero() {
        return true;
    }
    let mut seen_pos = false;
    let mut seen_neg = false;
    for j in 0..ROOT_SAMPLES {
        let xi = super::SAMPLE_SPAN * j as f64 / ROOT_SAMPLES as f64;
        let val = g.evaluate_real(xi, eta);
        if val == 0.0 {
            return true;
        }
        seen_pos |= val > 0.0;
        seen_neg |= val < 0.0;
        if seen_pos && seen_neg {
            return true;
        }
    }
    false
}
