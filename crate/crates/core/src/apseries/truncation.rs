use std::collections::BTreeMap;

use super::{ipow, Window};

pub const MAX_WEIGHT: u32 = 64;
pub const MAX_DEGREE: u32 = 32;
pub const MAX_R: f64 = 1.0;

/// Coefficient mass discarded by truncation, bucketed by Fourier weight and
/// Taylor degree so that its norm can be bounded in any window afterwards.
///
/// A bucket `(w, d)` holding mass `m` contributes `m * e^(r w) * s^d` to the
/// bound in window `(r, s)`. To keep the record small, degrees above
/// `MAX_DEGREE` are stored at `MAX_DEGREE` and weights above `MAX_WEIGHT` at
/// `MAX_WEIGHT` with the mass inflated by `e^(MAX_R (w - MAX_WEIGHT))`; the
/// bound stays an upper bound for `r <= MAX_R` and `s <= 1`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Truncation {
    buckets: BTreeMap<(u32, u32), f64>,
}

impl Truncation {
    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn record(&mut self, weight: u32, degree: u32, mass: f64) {
        if mass > 0.0 {
            let (w, m) = if weight > MAX_WEIGHT {
                (MAX_WEIGHT, mass * (MAX_R * f64::from(weight - MAX_WEIGHT)).exp())
            } else {
                (weight, mass)
            };
            *self.buckets.entry((w, degree.min(MAX_DEGREE))).or_insert(0.0) += m;
        }
    }

    pub fn bound(&self, window: Window) -> f64 {
        self.buckets
            .iter()
            .map(|(&(w, d), &m)| m * (window.r * f64::from(w)).exp() * ipow(window.s, d as i32))
            .sum()
    }

    pub fn buckets(&self) -> impl Iterator<Item = ((u32, u32), f64)> + '_ {
        self.buckets.iter().map(|(&k, &m)| (k, m))
    }

    pub fn merge(&mut self, other: &Truncation) {
        for (&k, &m) in &other.buckets {
            *self.buckets.entry(k).or_insert(0.0) += m;
        }
    }

    pub fn scaled(&self, factor: f64) -> Truncation {
        let factor = factor.abs();
        if factor == 0.0 {
            return Truncation::default();
        }
        Truncation {
            buckets: self.buckets.iter().map(|(&k, &m)| (k, m * factor)).collect(),
        }
    }

    /// Mass of a product: weights and degrees add, masses multiply.
    pub fn convolve(&self, other: &Truncation) -> Truncation {
        let a: Vec<(usize, usize, f64)> = self.buckets.iter().map(|(&(w, d), &m)| (w as usize, d as usize, m)).collect();
        let b: Vec<(usize, usize, f64)> = other.buckets.iter().map(|(&(w, d), &m)| (w as usize, d as usize, m)).collect();
        let mut grid = MassGrid::new(2 * MAX_WEIGHT as usize, 2 * MAX_DEGREE as usize);
        for &(w1, d1, m1) in &a {
            for &(w2, d2, m2) in &b {
                grid.add(w1 + w2, d1 + d2, m1 * m2);
            }
        }
        let mut out = Truncation::default();
        grid.into_truncation(&mut out);
        out
    }

    /// Effect of `d/dx`: `|(omega, l)| <= weight(l)` because `|omega_i| <= 1`.
    pub fn dx(&self) -> Truncation {
        Truncation {
            buckets: self
                .buckets
                .iter()
                .filter(|(&(w, _), _)| w > 0)
                .map(|(&(w, d), &m)| ((w, d), m * f64::from(w)))
                .collect(),
        }
    }

    /// Effect of `d/dy` on the monomial `(y - alpha)^d`.
    pub fn dy(&self) -> Truncation {
        let mut out = Truncation::default();
        for (&(w, d), &m) in &self.buckets {
            if d > 0 {
                out.record(w, d - 1, m * f64::from(d));
            }
        }
        out
    }
}

/// Dense accumulator used inside hot loops before converting to buckets.
pub(crate) struct MassGrid {
    max_weight: usize,
    max_degree: usize,
    cells: Vec<f64>,
}

impl MassGrid {
    pub(crate) fn new(max_weight: usize, max_degree: usize) -> Self {
        Self {
            max_weight,
            max_degree,
            cells: vec![0.0; (max_weight + 1) * (max_degree + 1)],
        }
    }

    #[inline]
    pub(crate) fn add(&mut self, weight: usize, degree: usize, mass: f64) {
        debug_assert!(weight <= self.max_weight && degree <= self.max_degree);
        self.cells[weight * (self.max_degree + 1) + degree] += mass;
    }

    pub(crate) fn absorb(&mut self, other: &MassGrid) {
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            *a += b;
        }
    }

    pub(crate) fn into_truncation(self, out: &mut Truncation) {
        let stride = self.max_degree + 1;
        for (i, &m) in self.cells.iter().enumerate() {
            if m > 0.0 {
                out.record((i / stride) as u32, (i % stride) as u32, m);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_weights_each_bucket() {
        let mut t = Truncation::default();
        t.record(2, 3, 0.5);
        t.record(0, 0, 1.0);
        let w = Window { r: 0.1, s: 0.5 };
        let expected = 1.0 + 0.5 * (0.2f64).exp() * 0.125;
        assert!((t.bound(w) - expected).abs() < 1e-15);
    }

    #[test]
    fn derivatives_shift_buckets() {
        let mut t = Truncation::default();
        t.record(3, 2, 1.0);
        t.record(0, 0, 7.0);
        let dy = t.dy();
        assert_eq!(dy.buckets().collect::<Vec<_>>(), vec![((3, 1), 2.0)]);
        let dx = t.dx();
        assert_eq!(dx.buckets().collect::<Vec<_>>(), vec![((3, 2), 3.0)]);
    }

    #[test]
    fn convolution_bounds_product() {
        let mut a = Truncation::default();
        a.record(1, 1, 2.0);
        let mut b = Truncation::default();
        b.record(2, 0, 3.0);
        let w = Window { r: 0.3, s: 0.2 };
        let c = a.convolve(&b);
        assert!((c.bound(w) - a.bound(w) * b.bound(w)).abs() < 1e-14);
    }

    #[test]
    fn clamped_buckets_stay_upper_bounds() {
        let mut exact = 0.0;
        let mut t = Truncation::default();
        let w = Window { r: 0.7, s: 0.9 };
        for (wt, d, m) in [(70u32, 40u32, 1e-3), (10, 50, 2.0), (100, 3, 1e-9)] {
            t.record(wt, d, m);
            exact += m * (w.r * f64::from(wt)).exp() * w.s.powi(d as i32);
        }
        assert!(t.bound(w) >= exact);
    }
}
