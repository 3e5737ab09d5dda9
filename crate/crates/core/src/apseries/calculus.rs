use num_complex::Complex64;

use super::truncation::Truncation;
use super::ApSeries;
use crate::numeric::{cis, sin_cos};

impl ApSeries {
    /// `x -> f(x + t, y)`: each coefficient gains the phase `e^{i (omega, l) t}`.
    pub fn shift_x(&self, t: f64) -> Self {
        let mut out = self.clone();
        let st = self.stride();
        for pos in 0..self.basis.len() {
            let e = cis(self.basis.freqs[pos] * t);
            out.coeffs[pos * st..(pos + 1) * st].iter_mut().for_each(|c| *c *= e);
        }
        out.finish();
        out
    }

    /// `f(x + t, y) - f(x, y)`, with each factor `e^{i theta t} - 1` formed
    /// without cancellation.
    pub fn difference(&self, t: f64) -> Self {
        let mut out = self.clone();
        let st = self.stride();
        for pos in 0..self.basis.len() {
            let d = unit_difference(self.basis.freqs[pos] * t);
            out.coeffs[pos * st..(pos + 1) * st].iter_mut().for_each(|c| *c *= d);
        }
        out.trunc = self.trunc.scaled(2.0);
        out.finish();
        out
    }

    /// Derivative in `x`: multiplies each coefficient by `i (omega, l)`.
    pub fn dx(&self) -> Self {
        let mut out = self.clone();
        let st = self.stride();
        for pos in 0..self.basis.len() {
            let k = Complex64::new(0.0, self.basis.freqs[pos]);
            out.coeffs[pos * st..(pos + 1) * st].iter_mut().for_each(|c| *c *= k);
        }
        out.trunc = self.trunc.dx();
        out.finish();
        out
    }

    /// Derivative in `y`; the top coefficient of every block becomes zero.
    pub fn dy(&self) -> Self {
        let mut out = self.clone();
        let st = self.stride();
        for pos in 0..self.basis.len() {
            let b = &mut out.coeffs[pos * st..(pos + 1) * st];
            for j in 1..st {
                b[j - 1] = b[j] * j as f64;
            }
            b[st - 1] = Complex64::new(0.0, 0.0);
        }
        out.trunc = self.trunc.dy();
        out.finish();
        out
    }

    /// Drops all Taylor coefficients above `degree`, recording their mass.
    pub fn taylor_truncate(&self, degree: usize) -> Self {
        let mut out = self.clone();
        let st = self.stride();
        for pos in 0..self.basis.len() {
            let w = self.basis.weights[pos];
            for j in degree + 1..st {
                let c = &mut out.coeffs[pos * st + j];
                out.trunc.record(w, j as u32, c.norm());
                *c = Complex64::new(0.0, 0.0);
            }
        }
        out.finish();
        out
    }

    /// `f - [f]`, removing the full mean polynomial.
    pub fn without_mean(&self) -> Self {
        let mut out = self.clone();
        out.block_mut(0).iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        out.finish();
        out
    }

    /// The sheared series `(x, y) -> f(x + y, y)`.
    ///
    /// With `y = alpha + t` each mode picks up `e^{i theta alpha} e^{i theta t}`,
    /// `theta = (omega, l)`; the second factor is expanded in `t` and the
    /// product truncated to the degree cap.
    pub fn twist_shear(&self) -> Self {
        let alpha = self.basis.alpha();
        let cap = self.cap;
        let st = self.stride();
        let mut out = ApSeries::zero(&self.basis, cap);
        out.real = self.real;
        let mut trunc = Truncation::default();
        for (pos, d) in self.active() {
            let theta = self.basis.freqs[pos];
            let w = self.basis.weights[pos];
            let phase = cis(theta * alpha);
            let series = exp_taylor(theta, cap);
            let src = &self.coeffs[pos * st..pos * st + d + 1];
            let dst = &mut out.coeffs[pos * st..(pos + 1) * st];
            for (a, ca) in src.iter().enumerate() {
                let ca = ca * phase;
                for (m, e) in series.iter().enumerate() {
                    if a + m <= cap {
                        dst[a + m] += ca * e;
                    } else {
                        trunc.record(w, (a + m) as u32, ca.norm() * e.norm());
                    }
                }
            }
        }
        // Discarded mass of the operand is sheared too; its modulus grows by
        // at most e^{|theta| s} <= e^{w s}, absorbed by raising the degree.
        for ((w, d), m) in self.trunc.buckets() {
            let mut term = m;
            for k in 0..64u32 {
                trunc.record(w, d + k, term);
                term *= f64::from(w) / f64::from(k + 1);
                if term < 1e-40 * m {
                    break;
                }
            }
        }
        out.trunc = trunc;
        out.finish();
        out
    }
}

/// `e^{i phi} - 1 = 2i sin(phi/2) e^{i phi/2}`.
pub fn unit_difference(phi: f64) -> Complex64 {
    let (s, c) = sin_cos(0.5 * phi);
    Complex64::new(0.0, 2.0 * s) * Complex64::new(c, s)
}

/// Taylor coefficients of `e^{i theta t}`, continued past `cap` until the
/// terms are negligible so the discarded part can be recorded.
fn exp_taylor(theta: f64, cap: usize) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(cap + 8);
    let mut term = Complex64::new(1.0, 0.0);
    let i_theta = Complex64::new(0.0, theta);
    for m in 0..cap + 400 {
        if m > cap && term.norm() < 1e-40 {
            break;
        }
        out.push(term);
        term = term * i_theta / (m + 1) as f64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::testing::small_basis;
    use super::super::{ApSeries, Window};
    use crate::multiindex::MultiIndex;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_real(seed: u64, cap: usize) -> ApSeries {
        let b = small_basis(6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut terms = Vec::new();
        for _ in 0..10 {
            let l = b.index(rng.gen_range(1..b.len())).clone();
            let poly: Vec<Complex64> = (0..=cap).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
            terms.push((l.negate(), poly.iter().map(|c| c.conj()).collect()));
            terms.push((l, poly));
        }
        ApSeries::from_terms(&b, cap, true, terms).unwrap()
    }

    #[test]
    fn shift_and_derivative_examples() {
        let b = small_basis(4);
        let e1 = MultiIndex::unit(1, 1);
        let f = ApSeries::from_terms(&b, 2, false, [(e1.clone(), vec![Complex64::new(1.0, 0.0)])]).unwrap();
        let w1 = b.context().omega[0];
        let g = f.shift_x(0.37);
        assert!((g.coefficient(&e1)[0] - Complex64::from_polar(1.0, w1 * 0.37)).norm() < 1e-15);
        let k = ApSeries::constant(&b, 2, 4.0);
        assert!(k.dx().is_zero());
        assert!(k.dy().is_zero());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let f = random_real(3, 4);
        let h = 1e-5;
        for (x, y) in [(0.3, 0.5), (10.0, 0.45), (-7.5, 0.6)] {
            let fd_x = (f.evaluate_real(x + h, y) - f.evaluate_real(x - h, y)) / (2.0 * h);
            let fd_y = (f.evaluate_real(x, y + h) - f.evaluate_real(x, y - h)) / (2.0 * h);
            assert!((f.dx().evaluate_real(x, y) - fd_x).abs() < 1e-7);
            assert!((f.dy().evaluate_real(x, y) - fd_y).abs() < 1e-7);
        }
    }

    #[test]
    fn shear_matches_pointwise() {
        let f = random_real(4, 6);
        let g = f.twist_shear();
        for (x, t) in [(0.3, 0.01), (4.0, -0.02), (-12.0, 0.005)] {
            let y = 0.5 + t;
            let direct = f.evaluate_real(x + y, y);
            let budget = g.truncation_bound(Window { r: 1e-12, s: t.abs() });
            assert!((g.evaluate_real(x, y) - direct).abs() <= budget + 1e-13);
        }
        assert!(g.truncation_bound(Window { r: 1e-12, s: 0.001 }) < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn cauchy_estimate_in_x(seed in 0u64..10_000, r in 0.05f64..1.0, frac in 0.05f64..0.95, s in 0.05f64..1.0) {
            let f = random_real(seed, 3);
            let rp = r * frac;
            let lhs = f.dx().norm(Window { r: rp, s });
            let rhs = f.norm(Window { r, s }) / (r - rp);
            prop_assert!(lhs <= rhs * (1.0 + 1e-12));
        }

        #[test]
        fn cauchy_estimate_in_y(seed in 0u64..10_000, r in 0.05f64..1.0, s in 0.05f64..1.0, frac in 0.05f64..0.95) {
            let f = random_real(seed, 5);
            let sp = s * frac;
            let lhs = f.dy().norm(Window { r, s: sp });
            let rhs = f.norm(Window { r, s }) / (s - sp);
            prop_assert!(lhs <= rhs * (1.0 + 1e-12));
        }

        #[test]
        fn operations_preserve_realness(seed in 0u64..10_000, x in -20.0f64..20.0, t in -0.1f64..0.1) {
            let f = random_real(seed, 3);
            for g in [f.dx(), f.dy(), f.shift_x(0.77), f.twist_shear(), f.mul(&f).unwrap()] {
                prop_assert!(g.is_real());
                prop_assert!(g.evaluate(x, 0.5 + t).im.abs() < 1e-12);
            }
        }
    }
}
