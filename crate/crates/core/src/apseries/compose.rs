use super::{ipow, ApSeries, Window, DROP_TOLERANCE};
use crate::error::{Error, Result};

/// How a composition was truncated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositionReport {
    /// Highest power of `u` kept.
    pub x_order: usize,
    /// Highest power of `v` kept.
    pub y_order: usize,
    /// Norm bound, in the target window, of all omitted expansion terms.
    pub remainder: f64,
}

const MAX_X_ORDER: usize = 120;

impl ApSeries {
    /// `(x, y) -> f(x + u(x, y), y + v(x, y))`.
    ///
    /// Expands `f` as `sum_{j,k} u^j v^k / (j! k!) d_x^j d_y^k f` and keeps
    /// every term whose norm bound in `target` reaches `DROP_TOLERANCE`
    /// times `||f||`. The omitted terms are bounded and recorded as mass at
    /// weight and degree zero, so that part of the truncation bound is valid
    /// for windows no larger than `target`.
    pub fn compose(&self, u: &Self, v: &Self, target: Window) -> Result<Self> {
        self.compose_with_report(u, v, target).map(|(h, _)| h)
    }

    pub fn compose_with_report(&self, u: &Self, v: &Self, target: Window) -> Result<(Self, CompositionReport)> {
        self.compatible(u)?;
        self.compatible(v)?;
        let n_f = self.norm(target);
        if n_f == 0.0 {
            let mut h = self.clone();
            h.real = self.real && u.real && v.real;
            return Ok((h, CompositionReport { x_order: 0, y_order: 0, remainder: 0.0 }));
        }
        let floor = DROP_TOLERANCE * n_f;
        let nu = u.norm(target);
        let nv = v.norm(target);
        let lambda = self
            .active()
            .iter()
            .map(|&(pos, _)| self.basis.freqs[pos].abs())
            .fold(0.0, f64::max);
        let kmax = self.degree();

        // Bound for everything beyond x-order J: the y-expansion of
        // d_x^j f is at most total_y * lambda^j, and the u-series tail is
        // (nu lambda)^(J+1) / (J+1)! e^(nu lambda).
        let y_norms: Vec<f64> = {
            let mut g = self.clone();
            let mut out = Vec::with_capacity(kmax + 1);
            for _ in 0..=kmax {
                out.push(g.norm(target));
                g = g.dy();
            }
            out
        };
        let total_y: f64 = y_norms
            .iter()
            .enumerate()
            .map(|(k, nk)| ipow(nv, k as i32) / factorial(k) * nk)
            .sum();
        let z = nu * lambda;
        let mut x_order = 0;
        let mut tail = total_y * z * z.exp();
        while tail >= floor {
            x_order += 1;
            if x_order > MAX_X_ORDER {
                return Err(Error::CompositionDomain {
                    size: nu + nv,
                    limit: 1.0 / lambda.max(f64::MIN_POSITIVE),
                });
            }
            tail *= z / (x_order + 1) as f64;
        }
        if nu == 0.0 {
            x_order = 0;
            tail = 0.0;
        }

        let mut remainder = tail;
        let mut plan: Vec<Vec<usize>> = Vec::with_capacity(x_order + 1);
        let mut derivs: Vec<Vec<Option<ApSeries>>> = Vec::with_capacity(x_order + 1);
        let mut y_order = 0;
        let mut fx = self.clone();
        for j in 0..=x_order {
            let mut keep = Vec::new();
            let mut row = Vec::with_capacity(kmax + 1);
            let mut fxy = fx.clone();
            for k in 0..=kmax {
                let b = ipow(nu, j as i32) * ipow(nv, k as i32) / (factorial(j) * factorial(k)) * fxy.norm(target);
                if b >= floor {
                    keep.push(k);
                    y_order = y_order.max(k);
                    row.push(Some(fxy.clone()));
                } else {
                    remainder += b;
                    row.push(None);
                }
                if k < kmax {
                    fxy = fxy.dy();
                }
            }
            plan.push(keep);
            derivs.push(row);
            if j < x_order {
                fx = fx.dx();
            }
        }

        let v_pows = if y_order > 0 { v.scaled_powers(y_order)? } else { Vec::new() };
        let mut h = ApSeries::zero(&self.basis, self.cap);
        let mut u_pow: Option<ApSeries> = None;
        for j in 0..=x_order {
            if j > 0 {
                u_pow = Some(match u_pow {
                    None => u.clone(),
                    Some(p) => p.mul(u)?.scale(1.0 / j as f64),
                });
            }
            if plan[j].is_empty() {
                continue;
            }
            let mut inner = ApSeries::zero(&self.basis, self.cap);
            for &k in &plan[j] {
                let d = derivs[j][k].as_ref().expect("planned term");
                let term = if k == 0 { d.clone() } else { d.mul(&v_pows[k])? };
                inner = inner.add(&term)?;
            }
            let term = match &u_pow {
                None => inner,
                Some(p) => inner.mul(p)?,
            };
            h = h.add(&term)?;
        }
        h.real = self.real && u.real && v.real;
        h.trunc.record(0, 0, remainder);
        h.finish();
        Ok((
            h,
            CompositionReport {
                x_order,
                y_order,
                remainder,
            },
        ))
    }
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// Composition guarded by the domain condition
/// `||u|| + ||v|| < min(r - r', s - s')`, norms taken in `target`.
pub fn compose_checked(f: &ApSeries, u: &ApSeries, v: &ApSeries, source: Window, target: Window) -> Result<ApSeries> {
    let size = u.norm(target) + v.norm(target);
    let limit = (source.r - target.r).min(source.s - target.s);
    if !(size < limit) {
        return Err(Error::CompositionDomain { size, limit });
    }
    f.compose(u, v, target)
}

/// Inverts the near-identity map `(x, y) -> (x + u, y + v)`.
///
/// Returns `(u', v')` with `u' = -u(x + u', y + v')` and
/// `v' = -v(x + u', y + v')` on the window shrunk by `shrink = (dr, ds)`.
pub fn invert_near_identity(
    u: &ApSeries,
    v: &ApSeries,
    window: Window,
    shrink: (f64, f64),
) -> Result<(ApSeries, ApSeries)> {
    let (dr, ds) = shrink;
    let target = window.shrink(dr, ds)?;
    let eps = u.norm(window) + v.norm(window);
    let smallness = (1.0 / dr).max(1.0 / ds) * eps * (2.0 * eps + (target.s + 2.0 * eps) / window.s).exp();
    if !(smallness < 0.5) {
        return Err(Error::ContractionFailure {
            module: "apseries",
            detail: format!("inversion smallness {smallness:e} is not below 1/2"),
        });
    }
    let mut up = u.neg();
    let mut vp = v.neg();
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        let un = u.compose(&up, &vp, target)?.neg();
        let vn = v.compose(&up, &vp, target)?.neg();
        let delta = un.sub(&up)?.norm(target) + vn.sub(&vp)?.norm(target);
        up = un;
        vp = vn;
        if delta < 1e-13 {
            return Ok((up, vp));
        }
        if delta >= last {
            return Err(Error::ContractionFailure {
                module: "apseries",
                detail: format!("inversion stalled at step size {delta:e}"),
            });
        }
        last = delta;
    }
    Err(Error::ContractionFailure {
        module: "apseries",
        detail: "inversion did not settle in 200 iterations".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::super::testing::small_basis;
    use super::*;
    use crate::multiindex::MultiIndex;
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_real(seed: u64, cap: usize, scale: f64, modes: usize) -> ApSeries {
        let b = small_basis(12);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let low: Vec<usize> = (1..b.len()).filter(|&p| b.weight(p) <= 2).collect();
        let mut terms = Vec::new();
        for _ in 0..modes {
            let l = b.index(low[rng.gen_range(0..low.len())]).clone();
            let poly: Vec<Complex64> = (0..=cap.min(2))
                .map(|_| scale * Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            terms.push((l.negate(), poly.iter().map(|c| c.conj()).collect()));
            terms.push((l, poly));
        }
        ApSeries::from_terms(&b, cap, true, terms).unwrap()
    }

    #[test]
    fn identity_and_constant_shift() {
        let b = small_basis(12);
        let f = random_real(1, 4, 1.0, 5);
        let zero = ApSeries::zero(&b, 4);
        let w = Window { r: 0.2, s: 0.1 };
        let h = f.compose(&zero, &zero, w).unwrap();
        assert!(h.sub(&f).unwrap().norm(w) < 1e-15);

        let y = ApSeries::action(&b, 4).unwrap();
        let u = random_real(2, 4, 1e-3, 3);
        let c = ApSeries::constant(&b, 4, 0.25);
        let h = y.compose(&u, &c, w).unwrap();
        let expected = y.add_constant(0.25);
        assert!(h.sub(&expected).unwrap().norm(w) < 1e-15);
    }

    #[test]
    fn composition_matches_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Window { r: 0.1, s: 0.05 };
        for seed in 0..5 {
            let f = random_real(seed, 6, 1.0, 6);
            let u = random_real(seed + 100, 6, 1e-3, 4);
            let v = random_real(seed + 200, 6, 1e-3, 4);
            let h = f.compose(&u, &v, w).unwrap();
            for _ in 0..20 {
                let x = rng.gen_range(-30.0..30.0);
                let y = 0.5 + rng.gen_range(-0.01..0.01);
                let direct = f.evaluate_real(x + u.evaluate_real(x, y), y + v.evaluate_real(x, y));
                let got = h.evaluate_real(x, y);
                let budget = h.truncation_bound(Window { r: 1e-12, s: (y - 0.5).abs() });
                assert!((got - direct).abs() <= budget + 1e-13, "seed {seed}: {got} vs {direct}");
                assert!((got - direct).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn composition_norm_bound() {
        let source = Window { r: 0.3, s: 0.2 };
        let target = Window { r: 0.2, s: 0.1 };
        for seed in 0..10 {
            let f = random_real(seed, 4, 1.0, 6);
            let u = random_real(seed + 50, 4, 2e-3, 3);
            let v = random_real(seed + 60, 4, 2e-3, 3);
            let eps = u.norm(target) + v.norm(target);
            let h = compose_checked(&f, &u, &v, source, target).unwrap();
            let bound = f.norm(source) * (eps + (target.s + eps) / source.s).exp();
            assert!(h.norm(target) <= bound + h.truncation_bound(target));
        }
    }

    #[test]
    fn checked_composition_rejects_large_shifts() {
        let b = small_basis(12);
        let f = random_real(1, 2, 1.0, 3);
        let big = ApSeries::constant(&b, 2, 0.5);
        let err = compose_checked(&f, &big, &big, Window { r: 0.3, s: 0.2 }, Window { r: 0.2, s: 0.1 }).unwrap_err();
        assert!(matches!(err, Error::CompositionDomain { .. }));
    }

    #[test]
    fn inversion_examples() {
        let b = small_basis(12);
        let w = Window { r: 0.3, s: 0.2 };
        let zero = ApSeries::zero(&b, 4);
        let (up, vp) = invert_near_identity(&zero, &zero, w, (0.1, 0.1)).unwrap();
        assert!(up.is_zero() && vp.is_zero());
        let c = ApSeries::constant(&b, 4, 1e-3);
        let (up, vp) = invert_near_identity(&c, &zero, w, (0.1, 0.1)).unwrap();
        assert!((up.evaluate_real(1.0, 0.5) + 1e-3).abs() < 1e-15);
        assert!(vp.is_zero());
        let huge = ApSeries::constant(&b, 4, 1.0);
        assert!(matches!(
            invert_near_identity(&huge, &zero, w, (0.1, 0.1)),
            Err(Error::ContractionFailure { .. })
        ));
        let _ = MultiIndex::zero();
    }

    #[test]
    fn inversion_round_trip() {
        let w = Window { r: 0.3, s: 0.2 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..4 {
            let u = random_real(seed, 4, 3e-4, 3);
            let v = random_real(seed + 10, 4, 3e-4, 3);
            let eps = u.norm(w) + v.norm(w);
            let shrunk = w.shrink(0.1, 0.1).unwrap();
            let (up, vp) = invert_near_identity(&u, &v, w, (0.1, 0.1)).unwrap();
            assert!(up.norm(shrunk) + vp.norm(shrunk) <= eps);
            for _ in 0..20 {
                let x = rng.gen_range(-20.0..20.0);
                let y = 0.5 + rng.gen_range(-0.05..0.05);
                let (x1, y1) = (x + up.evaluate_real(x, y), y + vp.evaluate_real(x, y));
                let (x2, y2) = (x1 + u.evaluate_real(x1, y1), y1 + v.evaluate_real(x1, y1));
                assert!((x2 - x).abs() < 1e-10 && (y2 - y).abs() < 1e-10);
            }
        }
    }
}
