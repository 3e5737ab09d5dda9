use num_complex::Complex64;
use rayon::prelude::*;

use super::truncation::{MassGrid, Truncation};
use super::{ApSeries, NONE};
use crate::error::Result;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

impl ApSeries {
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.combine(other, 1.0)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.combine(other, -1.0)
    }

    fn combine(&self, other: &Self, sign: f64) -> Result<Self> {
        self.compatible(other)?;
        let mut out = self.clone();
        for (a, b) in out.coeffs.iter_mut().zip(&other.coeffs) {
            *a += b * sign;
        }
        out.real = self.real && other.real;
        out.trunc.merge(&other.trunc);
        out.finish();
        Ok(out)
    }

    pub fn neg(&self) -> Self {
        self.scale(-1.0)
    }

    pub fn scale(&self, k: f64) -> Self {
        let mut out = self.clone();
        out.coeffs.iter_mut().for_each(|c| *c *= k);
        out.trunc = self.trunc.scaled(k);
        out.finish();
        out
    }

    /// Multiplication by a complex constant; the result is real only when
    /// the constant is.
    pub fn scale_complex(&self, k: Complex64) -> Self {
        let mut out = self.clone();
        out.coeffs.iter_mut().for_each(|c| *c *= k);
        out.real = self.real && k.im == 0.0;
        out.trunc = self.trunc.scaled(k.norm());
        out.finish();
        out
    }

    /// Adds a constant to the mean.
    pub fn add_constant(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.coeffs[0] += c;
        out.finish();
        out
    }

    /// Coefficient magnitudes bucketed like truncation mass.
    pub(crate) fn profile(&self) -> Truncation {
        let mut p = Truncation::default();
        for (pos, b) in self.blocks() {
            let w = self.basis.weights[pos];
            for (j, c) in b.iter().enumerate() {
                p.record(w, j as u32, c.norm());
            }
        }
        p
    }

    /// Product of two series. Index sums outside the lattice and Taylor
    /// degrees above the cap are dropped and their mass recorded; the
    /// operands' own truncation records are propagated.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.compatible(other)?;
        let basis = &self.basis;
        let n = basis.len();
        let st = self.stride();
        let cap = self.cap;
        let table = basis.sums();

        let mut deg_a = vec![usize::MAX; n];
        for (pos, d) in self.active() {
            deg_a[pos] = d;
        }
        let mut deg_b = vec![usize::MAX; n];
        for (pos, d) in other.active() {
            deg_b[pos] = d;
        }
        let a = &self.coeffs;
        let b = &other.coeffs;

        // In-lattice products, one output block per task, accumulated in
        // the sorted preimage order so the result does not depend on the
        // thread count.
        let blocks: Vec<(Vec<Complex64>, MassGrid)> = (0..n)
            .into_par_iter()
            .map(|t| {
                let mut acc = vec![ZERO; st];
                let mut over = MassGrid::new(0, 2 * cap);
                for &(i, k) in &table.preimages[t] {
                    let (i, k) = (i as usize, k as usize);
                    let (da, db) = (deg_a[i], deg_b[k]);
                    if da == usize::MAX || db == usize::MAX {
                        continue;
                    }
                    let pa = &a[i * st..i * st + da + 1];
                    let pb = &b[k * st..k * st + db + 1];
                    for (x, ca) in pa.iter().enumerate() {
                        if ca.re == 0.0 && ca.im == 0.0 {
                            continue;
                        }
                        for (y, cb) in pb.iter().enumerate() {
                            if x + y <= cap {
                                acc[x + y] += ca * cb;
                            } else {
                                over.add(0, x + y, ca.norm() * cb.norm());
                            }
                        }
                    }
                }
                (acc, over)
            })
            .collect();

        let mut out = ApSeries::zero(&self.basis, cap);
        out.real = self.real && other.real;
        let mut trunc = Truncation::default();
        for (t, (acc, over)) in blocks.into_iter().enumerate() {
            out.block_mut(t).copy_from_slice(&acc);
            let mut shifted = Truncation::default();
            over.into_truncation(&mut shifted);
            for ((_, d), m) in shifted.buckets() {
                trunc.record(basis.weights[t], d, m);
            }
        }

        // Products leaving the lattice, bucketed by the weight of the sum.
        let max_w = table.max_weight as usize;
        let outside: Vec<MassGrid> = (0..n)
            .into_par_iter()
            .filter(|&i| deg_a[i] != usize::MAX)
            .map(|i| {
                let mut grid = MassGrid::new(max_w, 2 * cap);
                let ma: Vec<f64> = a[i * st..i * st + deg_a[i] + 1].iter().map(|c| c.norm()).collect();
                for k in 0..n {
                    if deg_b[k] == usize::MAX || table.target[i * n + k] != NONE {
                        continue;
                    }
                    let w = table.weight[i * n + k] as usize;
                    for (x, &ca) in ma.iter().enumerate() {
                        for (y, cb) in b[k * st..k * st + deg_b[k] + 1].iter().enumerate() {
                            grid.add(w, x + y, ca * cb.norm());
                        }
                    }
                }
                grid
            })
            .collect();
        let mut total = MassGrid::new(max_w, 2 * cap);
        for g in &outside {
            total.absorb(g);
        }
        total.into_truncation(&mut trunc);

        if !self.trunc.is_empty() || !other.trunc.is_empty() {
            // t_a * (p_b + t_b) + p_a * t_b
            let mut pb = other.profile();
            pb.merge(&other.trunc);
            trunc.merge(&self.trunc.convolve(&pb));
            trunc.merge(&self.profile().convolve(&other.trunc));
        }
        out.trunc = trunc;
        out.finish();
        Ok(out)
    }

    /// `self^k / k!` for `k = 0..=max`.
    pub fn scaled_powers(&self, max: usize) -> Result<Vec<Self>> {
        let mut out = Vec::with_capacity(max + 1);
        out.push(ApSeries::constant(&self.basis, self.cap, 1.0));
        for k in 1..=max {
            let next = out[k - 1].mul(self)?.scale(1.0 / k as f64);
            out.push(next);
        }
        Ok(out)
    }
}
