//! Elementary functions whose results do not depend on how the caller was
//! optimized, so that outputs are bit-identical across build profiles.

use std::hint::black_box;

use num_complex::Complex64;

/// `x^n` by repeated squaring in a fixed order. Unlike `f64::powi` the
/// result does not depend on how the call was optimized, which keeps
/// outputs identical across builds.
pub fn ipow(x: f64, n: i32) -> f64 {
    let (mut base, mut e) = if n < 0 { (1.0 / x, n.unsigned_abs()) } else { (x, n as u32) };
    let mut acc = 1.0;
    while e > 0 {
        if e & 1 == 1 {
            acc *= base;
        }
        base *= base;
        e >>= 1;
    }
    acc
}

/// `(sin x, cos x)` from separate calls. The opaque copies stop the
/// compiler from fusing them into `sincos`, whose last bit can differ.
#[inline]
pub fn sin_cos(x: f64) -> (f64, f64) {
    (black_box(x).sin(), black_box(x).cos())
}

/// `e^(i x)`.
#[inline]
pub fn cis(x: f64) -> Complex64 {
    let (s, c) = sin_cos(x);
    Complex64::new(c, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn powers_and_trig_match_std() {
        for &x in &[0.3, 1.7, -2.5] {
            for n in -6..=6 {
                assert!((ipow(x, n) - x.powi(n)).abs() <= 1e-14 * x.powi(n).abs());
            }
            assert_eq!(sin_cos(x), (x.sin(), x.cos()));
            assert_eq!(cis(x), Complex64::new(x.cos(), x.sin()));
        }
        assert_eq!(ipow(2.0, 10), 1024.0);
        assert_eq!(ipow(0.5, -3), 8.0);
    }
}
