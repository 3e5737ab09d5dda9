//! Truncated almost periodic series in one angle `x` and one action `y`.
//!
//! A series is `f(x, y) = sum_l f_l(y) e^{i (omega, l) x}` where `l` runs
//! over the verified lattice of a [`FrequencyContext`] and each `f_l` is a
//! polynomial in `y - alpha` of degree at most `degree_cap`. A cap of zero
//! gives functions of `x` alone. Norms take the window `(r, s)` as an
//! argument: `||f||_{r,s} = sum_l e^{r ||l||} sum_j |c_{l,j}| s^j`.

mod arith;
mod calculus;
mod compose;
mod io;
mod truncation;

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frequency::FrequencyContext;
use crate::numeric::cis;
use crate::multiindex::MultiIndex;

pub use calculus::unit_difference;
pub use compose::{compose_checked, invert_near_identity, CompositionReport};
pub use io::SeriesWire;
pub use truncation::Truncation;
pub use crate::numeric::ipow;

/// Coefficients below this fraction of the unweighted coefficient sum are
/// moved into the truncation record.
pub const DROP_TOLERANCE: f64 = 1e-16;

pub const DEFAULT_DEGREE_CAP: usize = 8;

const NONE: u32 = u32::MAX;

/// Analyticity window: strip half-width `r` in `x`, disk radius `s` around
/// `alpha` in `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub r: f64,
    pub s: f64,
}

impl Window {
    pub fn new(r: f64, s: f64) -> Result<Self> {
        if !(r > 0.0 && s > 0.0 && r.is_finite() && s.is_finite()) {
            return Err(Error::invalid(
                "apseries",
                format!("window needs r > 0 and s > 0, got ({r}, {s})"),
            ));
        }
        Ok(Self { r, s })
    }

    pub fn shrink(&self, dr: f64, ds: f64) -> Result<Self> {
        Window::new(self.r - dr, self.s - ds)
    }
}

/// The enumerated mode set of a context, shared by every series over it.
pub struct Basis {
    ctx: FrequencyContext,
    indices: Vec<MultiIndex>,
    lookup: HashMap<MultiIndex, usize>,
    freqs: Vec<f64>,
    weights: Vec<u32>,
    neg: Vec<usize>,
    sums: OnceLock<SumTable>,
}

/// Index arithmetic on the basis: `target[i * n + k]` is the position of
/// `l_i + l_k` (or `NONE` outside the lattice) and `weight` its weight.
struct SumTable {
    target: Vec<u32>,
    weight: Vec<u32>,
    /// For every position `t`, the pairs `(i, k)` with `l_i + l_k = l_t`,
    /// sorted; products accumulate in this order.
    preimages: Vec<Vec<(u32, u32)>>,
    max_weight: u32,
}

impl Basis {
    /// Builds the basis of a context whose rotation number has been set.
    pub fn new(ctx: FrequencyContext) -> Result<Arc<Self>> {
        if ctx.alpha.is_none() {
            return Err(Error::invalid(
                "apseries",
                "frequency context has no rotation number; series are centered at alpha",
            ));
        }
        let indices = ctx.lattice.indices();
        debug_assert!(indices[0].is_zero());
        let lookup: HashMap<MultiIndex, usize> =
            indices.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        let freqs = indices.iter().map(|l| l.dot(&ctx.omega)).collect();
        let weights = indices.iter().map(|l| l.weight() as u32).collect();
        let neg = indices.iter().map(|l| lookup[&l.negate()]).collect();
        Ok(Arc::new(Self {
            ctx,
            indices,
            lookup,
            freqs,
            weights,
            neg,
            sums: OnceLock::new(),
        }))
    }

    pub fn context(&self) -> &FrequencyContext {
        &self.ctx
    }

    pub fn alpha(&self) -> f64 {
        self.ctx.alpha()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn index(&self, pos: usize) -> &MultiIndex {
        &self.indices[pos]
    }

    pub fn position(&self, l: &MultiIndex) -> Option<usize> {
        self.lookup.get(l).copied()
    }

    /// `(omega, l)` for the mode at `pos`.
    pub fn frequency(&self, pos: usize) -> f64 {
        self.freqs[pos]
    }

    pub fn weight(&self, pos: usize) -> u32 {
        self.weights[pos]
    }

    fn sums(&self) -> &SumTable {
        self.sums.get_or_init(|| {
            let n = self.len();
            let mut target = vec![NONE; n * n];
            let mut weight = vec![0u32; n * n];
            let mut preimages = vec![Vec::new(); n];
            let mut max_weight = 0;
            for i in 0..n {
                for k in 0..n {
                    let sum = self.indices[i].add(&self.indices[k]);
                    let w = sum.weight() as u32;
                    max_weight = max_weight.max(w);
                    weight[i * n + k] = w;
                    if let Some(&t) = self.lookup.get(&sum) {
                        target[i * n + k] = t as u32;
                        preimages[t].push((i as u32, k as u32));
                    }
                }
            }
            SumTable {
                target,
                weight,
                preimages,
                max_weight,
            }
        })
    }
}

impl fmt::Debug for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Basis")
            .field("modes", &self.indices.len())
            .field("omega", &self.ctx.omega)
            .field("alpha", &self.ctx.alpha)
            .finish()
    }
}

/// A truncated series together with the mass its construction discarded.
#[derive(Clone)]
pub struct ApSeries {
    basis: Arc<Basis>,
    cap: usize,
    real: bool,
    coeffs: Vec<Complex64>,
    trunc: Truncation,
}

impl fmt::Debug for ApSeries {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut m = f.debug_map();
        for (pos, block) in self.blocks() {
            m.entry(&self.basis.indices[pos], &block);
        }
        m.finish()
    }
}

impl ApSeries {
    pub fn zero(basis: &Arc<Basis>, degree_cap: usize) -> Self {
        Self {
            basis: Arc::clone(basis),
            cap: degree_cap,
            real: true,
            coeffs: vec![Complex64::new(0.0, 0.0); basis.len() * (degree_cap + 1)],
            trunc: Truncation::default(),
        }
    }

    pub fn constant(basis: &Arc<Basis>, degree_cap: usize, c: f64) -> Self {
        let mut f = Self::zero(basis, degree_cap);
        f.coeffs[0] = Complex64::new(c, 0.0);
        f
    }

    /// The function `y - alpha`.
    pub fn action(basis: &Arc<Basis>, degree_cap: usize) -> Result<Self> {
        if degree_cap == 0 {
            return Err(Error::invalid("apseries", "y - alpha needs degree cap at least 1"));
        }
        let mut f = Self::zero(basis, degree_cap);
        f.coeffs[1] = Complex64::new(1.0, 0.0);
        Ok(f)
    }

    /// Builds a series from `(index, polynomial)` pairs; repeated indices
    /// add. When `real` is set the pairs must already satisfy
    /// `f_{-l} = conj(f_l)`; the result is symmetrized and the asymmetry is
    /// rejected if it exceeds `1e-12` of the coefficient sum.
    pub fn from_terms<I>(basis: &Arc<Basis>, degree_cap: usize, real: bool, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (MultiIndex, Vec<Complex64>)>,
    {
        let mut f = Self::zero(basis, degree_cap);
        f.real = real;
        for (l, poly) in terms {
            let pos = basis.position(&l).ok_or_else(|| Error::UnverifiedIndex(l.to_string()))?;
            if poly.len() > degree_cap + 1
                && poly[degree_cap + 1..].iter().any(|c| *c != Complex64::new(0.0, 0.0)) {
                    return Err(Error::invalid(
                        "apseries",
                        format!("polynomial of index {l} exceeds degree cap {degree_cap}"),
                    ));
                }
            for (j, c) in poly.iter().take(degree_cap + 1).enumerate() {
                if !(c.re.is_finite() && c.im.is_finite()) {
                    return Err(Error::invalid("apseries", format!("non-finite coefficient at {l}")));
                }
                f.coeffs[pos * (degree_cap + 1) + j] += c;
            }
        }
        if real {
            let scale = f.coeffs.iter().map(|c| c.norm()).sum::<f64>();
            let asym = f.asymmetry();
            if asym > 1e-12 * scale.max(f64::MIN_POSITIVE) {
                return Err(Error::invalid(
                    "apseries",
                    format!("terms marked real violate f_(-l) = conj(f_l) by {asym:e}"),
                ));
            }
        }
        f.finish();
        Ok(f)
    }

    /// `sum_n a_n cos((omega, l_n) x + phase_n)` as a real series in `x`
    /// with constant dependence on `y`.
    pub fn trig_sum(basis: &Arc<Basis>, degree_cap: usize, modes: &[(MultiIndex, f64, f64)]) -> Result<Self> {
        let mut terms = Vec::with_capacity(2 * modes.len());
        for (l, amp, phase) in modes {
            let half = cis(*phase) * (0.5 * amp);
            terms.push((l.clone(), vec![half]));
            terms.push((l.negate(), vec![half.conj()]));
        }
        Self::from_terms(basis, degree_cap, true, terms)
    }

    pub fn basis(&self) -> &Arc<Basis> {
        &self.basis
    }

    pub fn degree_cap(&self) -> usize {
        self.cap
    }

    pub fn is_real(&self) -> bool {
        self.real
    }

    pub fn truncation(&self) -> &Truncation {
        &self.trunc
    }

    /// Norm bound on the mass discarded while building this series.
    pub fn truncation_bound(&self, window: Window) -> f64 {
        self.trunc.bound(window)
    }

    pub fn clear_truncation(&mut self) {
        self.trunc = Truncation::default();
    }

    #[inline]
    fn stride(&self) -> usize {
        self.cap + 1
    }

    #[inline]
    pub(crate) fn block(&self, pos: usize) -> &[Complex64] {
        let st = self.stride();
        &self.coeffs[pos * st..(pos + 1) * st]
    }

    #[inline]
    pub(crate) fn block_mut(&mut self, pos: usize) -> &mut [Complex64] {
        let st = self.stride();
        &mut self.coeffs[pos * st..(pos + 1) * st]
    }

    /// Nonzero modes as `(position, coefficients)` in basis order.
    pub fn blocks(&self) -> impl Iterator<Item = (usize, &[Complex64])> + '_ {
        self.coeffs
            .chunks(self.stride())
            .enumerate()
            .filter(|(_, b)| b.iter().any(|c| c.re != 0.0 || c.im != 0.0))
    }

    /// Nonzero modes with the index of their highest nonzero coefficient.
    pub(crate) fn active(&self) -> Vec<(usize, usize)> {
        self.blocks()
            .map(|(pos, b)| {
                let deg = b.iter().rposition(|c| c.re != 0.0 || c.im != 0.0).unwrap_or(0);
                (pos, deg)
            })
            .collect()
    }

    pub fn num_terms(&self) -> usize {
        self.blocks().count()
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.re == 0.0 && c.im == 0.0)
    }

    /// Highest Taylor degree with a nonzero coefficient.
    pub fn degree(&self) -> usize {
        self.active().iter().map(|&(_, d)| d).max().unwrap_or(0)
    }

    /// Coefficient polynomial of `l`; zero when `l` is not stored.
    pub fn coefficient(&self, l: &MultiIndex) -> Vec<Complex64> {
        match self.basis.position(l) {
            Some(pos) => self.block(pos).to_vec(),
            None => vec![Complex64::new(0.0, 0.0); self.stride()],
        }
    }

    pub fn terms(&self) -> impl Iterator<Item = (&MultiIndex, &[Complex64])> + '_ {
        self.blocks().map(|(pos, b)| (&self.basis.indices[pos], b))
    }

    /// `sum_l e^{r ||l||} sum_j |c_{l,j}| s^j`.
    pub fn norm(&self, window: Window) -> f64 {
        self.blocks()
            .map(|(pos, b)| {
                let w = (window.r * f64::from(self.basis.weights[pos])).exp();
                w * poly_disk_bound(b, window.s)
            })
            .sum()
    }

    /// `sum_l |f_l| e^{r ||l||}`, the norm of a function of `x` alone; for a
    /// nonzero degree cap the polynomial part is measured at `s = 1`.
    pub fn norm_r(&self, r: f64) -> f64 {
        self.norm(Window { r, s: 1.0 })
    }

    /// Unweighted coefficient sum, the reference for dropping.
    fn l1(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).sum()
    }

    pub fn evaluate(&self, x: f64, y: f64) -> Complex64 {
        let t = y - self.basis.alpha();
        let mut acc = Complex64::new(0.0, 0.0);
        for (pos, b) in self.blocks() {
            let e = cis(self.basis.freqs[pos] * x);
            acc += e * horner(b, Complex64::new(t, 0.0));
        }
        acc
    }

    /// Real value of a real series; the imaginary residue is rounding only.
    pub fn evaluate_real(&self, x: f64, y: f64) -> f64 {
        let z = self.evaluate(x, y);
        debug_assert!(
            !self.real || z.im.abs() <= 1e-12 * (1.0 + self.l1()),
            "imaginary residue {} in a real series",
            z.im
        );
        z.re
    }

    /// Mean over `x`: the polynomial of the zero index.
    pub fn mean(&self) -> Vec<Complex64> {
        self.block(0).to_vec()
    }

    /// Same series with a different degree cap; lowering the cap moves the
    /// discarded coefficients into the truncation record.
    pub fn with_degree_cap(&self, cap: usize) -> Self {
        let mut out = Self::zero(&self.basis, cap);
        out.real = self.real;
        out.trunc = self.trunc.clone();
        for (pos, b) in self.blocks() {
            let w = self.basis.weights[pos];
            for (j, c) in b.iter().enumerate() {
                if j <= cap {
                    out.coeffs[pos * (cap + 1) + j] = *c;
                } else {
                    out.trunc.record(w, j as u32, c.norm());
                }
            }
        }
        out
    }

    /// The function `x -> f(x, alpha + t)`.
    pub fn restrict_y(&self, t: f64) -> Self {
        let mut out = Self::zero(&self.basis, 0);
        out.real = self.real;
        for (pos, b) in self.blocks() {
            out.coeffs[pos] = horner(b, Complex64::new(t, 0.0));
        }
        // Degree-d mass evaluated at |y - alpha| = |t| lands at degree 0.
        for ((w, d), m) in self.trunc.buckets() {
            out.trunc.record(w, 0, m * ipow(t.abs(), d as i32));
        }
        out.finish();
        out
    }

    fn compatible(&self, other: &Self) -> Result<()> {
        if !Arc::ptr_eq(&self.basis, &other.basis) && self.basis.ctx != other.basis.ctx {
            return Err(Error::ContextMismatch);
        }
        if self.cap != other.cap {
            return Err(Error::invalid(
                "apseries",
                format!("degree caps differ ({} vs {})", self.cap, other.cap),
            ));
        }
        Ok(())
    }

    /// Largest deviation from `f_{-l} = conj(f_l)`.
    fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for pos in 0..self.basis.len() {
            let neg = self.basis.neg[pos];
            for (a, b) in self.block(pos).iter().zip(self.block(neg)) {
                worst = worst.max((a - b.conj()).norm());
            }
        }
        worst
    }

    /// Restores the realness symmetry and moves negligible coefficients into
    /// the truncation record. Every constructor and operation ends here.
    fn finish(&mut self) {
        if self.real {
            let st = self.stride();
            for pos in 0..self.basis.len() {
                let neg = self.basis.neg[pos];
                if neg < pos {
                    continue;
                }
                for j in 0..st {
                    let a = self.coeffs[pos * st + j];
                    let b = self.coeffs[neg * st + j];
                    let sym = 0.5 * (a + b.conj());
                    self.coeffs[pos * st + j] = sym;
                    self.coeffs[neg * st + j] = sym.conj();
                }
            }
        }
        let floor = DROP_TOLERANCE * self.l1();
        let st = self.stride();
        for (i, c) in self.coeffs.iter_mut().enumerate() {
            let m = c.norm();
            if m != 0.0 && m < floor {
                self.trunc.record(self.basis.weights[i / st], (i % st) as u32, m);
                *c = Complex64::new(0.0, 0.0);
            }
        }
    }
}

/// `sum_j |c_j| s^j`, the computable upper bound for the sup of the
/// polynomial over the disk of radius `s`.
pub fn poly_disk_bound(poly: &[Complex64], s: f64) -> f64 {
    poly.iter().rev().fold(0.0, |acc, c| acc * s + c.norm())
}

#[inline]
fn horner(poly: &[Complex64], t: Complex64) -> Complex64 {
    poly.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, c| acc * t + c)
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use crate::frequency::{DiophantineParams, Lattice};

    /// Context with fixed, verified frequencies used across unit tests.
    pub fn small_basis(max_weight: u64) -> Arc<Basis> {
        let lattice = Lattice {
            max_dim: 3,
            max_weight,
            max_order: max_weight as u32,
        };
        let ctx = FrequencyContext::new(
            vec![0.7548776662466927, 0.5698402909980532, 0.324_717_957_244_746],
            DiophantineParams::default(),
            lattice,
            Some(0.5),
            (0.4, 0.6),
        )
        .unwrap();
        Basis::new(ctx).unwrap()
    }
}
