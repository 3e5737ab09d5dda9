//! Gragg-Bulirsch-Stoer extrapolation for planar first-order systems.

use crate::apseries::ipow;
use crate::error::{Error, Result};

/// Substep counts of the extrapolation columns.
const SEQUENCE: [usize; 8] = [2, 4, 6, 8, 10, 12, 14, 16];
const MAX_STEPS: u64 = 200_000_000;

pub(crate) type State = [f64; 2];

pub(crate) struct Gbs<F> {
    rhs: F,
    tol: f64,
    h: f64,
    pub(crate) steps: u64,
}

/// Gragg's modified midpoint rule with `n` substeps over `big_h`.
fn midpoint<F: Fn(f64, &State) -> State>(rhs: &F, t: f64, y: &State, f0: &State, big_h: f64, n: usize) -> State {
    let h = big_h / n as f64;
    let mut z0 = *y;
    let mut z1 = [y[0] + h * f0[0], y[1] + h * f0[1]];
    for m in 1..n {
        let f = rhs(t + m as f64 * h, &z1);
        let z2 = [z0[0] + 2.0 * h * f[0], z0[1] + 2.0 * h * f[1]];
        z0 = z1;
        z1 = z2;
    }
    let f = rhs(t + big_h, &z1);
    [
        0.5 * (z1[0] + z0[0] + h * f[0]),
        0.5 * (z1[1] + z0[1] + h * f[1]),
    ]
}

impl<F: Fn(f64, &State) -> State> Gbs<F> {
    /// Relative and absolute tolerance `tol` per step.
    pub(crate) fn new(rhs: F, tol: f64) -> Self {
        Self {
            rhs,
            tol,
            h: 0.0,
            steps: 0,
        }
    }

    /// Advances `(t, y)` to `t_end`, calling `observe` after every accepted
    /// step; a `false` from `observe` stops the integration early and the
    /// call returns `false`.
    pub(crate) fn advance<O>(&mut self, t: &mut f64, y: &mut State, t_end: f64, mut observe: O) -> Result<bool>
    where
        O: FnMut(f64, &State) -> bool,
    {
        let span = t_end - *t;
        if span <= 0.0 {
            return Ok(true);
        }
        if self.h <= 0.0 {
            self.h = (0.1 * span).min(0.1);
        }
        while *t < t_end {
            let mut big_h = self.h.min(t_end - *t);
            let last = big_h >= t_end - *t;
            loop {
                if big_h <= 1e-14 * t.abs().max(1.0) || !big_h.is_finite() {
                    return Err(Error::StepSizeUnderflow { t: *t });
                }
                self.steps += 1;
                if self.steps > MAX_STEPS {
                    return Err(Error::ContractionFailure {
                        module: "pendulum",
                        detail: format!("integrator exceeded {MAX_STEPS} steps at t = {t}"),
                    });
                }
                match self.try_step(*t, y, big_h) {
                    Some((y_new, factor)) => {
                        *t = if last { t_end } else { *t + big_h };
                        *y = y_new;
                        self.h = big_h * factor;
                        break;
                    }
                    None => big_h *= 0.25,
                }
            }
            if !observe(*t, y) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// One extrapolated step; returns the new state and the step growth
    /// factor, or `None` if no column met the tolerance.
    fn try_step(&self, t: f64, y: &State, big_h: f64) -> Option<(State, f64)> {
        let f0 = (self.rhs)(t, y);
        let mut table: Vec<Vec<State>> = Vec::with_capacity(SEQUENCE.len());
        for (k, &n) in SEQUENCE.iter().enumerate() {
            let mut row = vec![midpoint(&self.rhs, t, y, &f0, big_h, n)];
            for j in 1..=k {
                let ratio = ipow(n as f64 / SEQUENCE[k - j] as f64, 2) - 1.0;
                let (a, b) = (row[j - 1], table[k - 1][j - 1]);
                row.push([a[0] + (a[0] - b[0]) / ratio, a[1] + (a[1] - b[1]) / ratio]);
            }
            if k >= 2 {
                let best = row[k];
                let prev = row[k - 1];
                let err = (0..2)
                    .map(|i| (best[i] - prev[i]).abs() / (self.tol * (1.0 + best[i].abs().max(y[i].abs()))))
                    .fold(0.0f64, f64::max);
                if !err.is_finite() {
                    return None;
                }
                if err <= 1.0 {
                    let expo = 1.0 / (2 * k + 1) as f64;
                    let mut factor = (0.94 * (0.65 / err.max(1e-12)).powf(expo)).clamp(0.2, 4.0);
                    if k == SEQUENCE.len() - 1 {
                        factor = factor.min(0.7);
                    } else if k <= 4 {
                        factor = factor.max(1.5);
                    }
                    return Some((best, factor));
                }
            }
            table.push(row);
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_oscillator_matches_closed_form() {
        // x'' = cos t, x(0) = 0, x'(0) = 1.
        for &tol in &[1e-8, 1e-12] {
            let mut g = Gbs::new(|t: f64, y: &State| [y[1], t.cos()], tol);
            let (mut t, mut y) = (0.0, [0.0, 1.0]);
            g.advance(&mut t, &mut y, 20.0, |_, _| true).unwrap();
            assert_eq!(t, 20.0);
            let exact = 20.0 + 1.0 - 20f64.cos();
            assert!((y[0] - exact).abs() < 100.0 * tol * 21.0, "{tol}: {:e}", y[0] - exact);
            assert!((y[1] - 1.0 - 20f64.sin()).abs() < 100.0 * tol);
        }
    }

    #[test]
    fn harmonic_oscillator_keeps_its_energy() {
        let mut g = Gbs::new(|_: f64, y: &State| [y[1], -y[0]], 1e-12);
        let (mut t, mut y) = (0.0, [1.0, 0.0]);
        let mut worst: f64 = 0.0;
        g.advance(&mut t, &mut y, 500.0, |_, y| {
            worst = worst.max((y[0] * y[0] + y[1] * y[1] - 1.0).abs());
            true
        })
        .unwrap();
        assert!(worst < 1e-10, "{worst:e}");
        assert!((y[0] - 500f64.cos()).abs() < 1e-9);
    }

    #[test]
    fn observer_can_stop_early() {
        let mut g = Gbs::new(|_: f64, _: &State| [1.0, 0.0], 1e-10);
        let (mut t, mut y) = (0.0, [0.0, 0.0]);
        let done = g.advance(&mut t, &mut y, 10.0, |t, _| t < 1.0).unwrap();
        assert!(!done && (1.0..10.0).contains(&t));
    }
}
