//! Diophantine frequency vectors and admissible rotation numbers.
//!
//! A frequency vector `omega` is accepted when `|(omega, l)|` stays above
//! `gamma0 / prod_i (1 + i^(1+mu) |l_i|^(1+mu))` for every nonzero `l` of a
//! finite verification lattice; a rotation number `alpha` is accepted when
//! `(omega, l) * alpha / 2pi` keeps away from the integers by
//! `gamma * prod_i 1 / (1 + i^(2+2mu) |l_i|^(2+2mu))`. Both are found by
//! rejection sampling from the uniform product measure.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multiindex::{enumerate_up_to, MultiIndex};

pub const DEFAULT_GAMMA0: f64 = 1e-4;
pub const DEFAULT_GAMMA: f64 = 1e-4;
pub const DEFAULT_MU: f64 = 1.0;
pub const DEFAULT_MAX_DIM: usize = 4;
pub const DEFAULT_MAX_WEIGHT: u64 = 12;
pub const DEFAULT_MAX_ORDER: u32 = 12;
pub const DEFAULT_MAX_ATTEMPTS: usize = 10_000;
pub const DEFAULT_INTERVAL: (f64, f64) = (0.4, 0.6);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiophantineParams {
    pub gamma0: f64,
    pub mu: f64,
    pub gamma: f64,
}

impl Default for DiophantineParams {
    fn default() -> Self {
        Self {
            gamma0: DEFAULT_GAMMA0,
            mu: DEFAULT_MU,
            gamma: DEFAULT_GAMMA,
        }
    }
}

impl DiophantineParams {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.gamma0) && ok(self.mu) && ok(self.gamma)) {
            return Err(Error::invalid(
                "frequency",
                format!("gamma0, mu and gamma must be positive, got {self:?}"),
            ));
        }
        Ok(())
    }
}

/// The finite set of indices a context has been verified on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lattice {
    pub max_dim: usize,
    pub max_weight: u64,
    pub max_order: u32,
}

impl Default for Lattice {
    fn default() -> Self {
        Self {
            max_dim: DEFAULT_MAX_DIM,
            max_weight: DEFAULT_MAX_WEIGHT,
            max_order: DEFAULT_MAX_ORDER,
        }
    }
}

impl Lattice {
    pub fn contains(&self, l: &MultiIndex) -> bool {
        l.max_position() as usize <= self.max_dim
            && l.weight() <= self.max_weight
            && l.max_order() <= self.max_order
    }

    /// Nonzero lattice members in enumeration order.
    pub fn nonzero_indices(&self) -> Vec<MultiIndex> {
        enumerate_up_to(self.max_dim, self.max_weight)
            .into_iter()
            .filter(|l| !l.is_zero() && l.max_order() <= self.max_order)
            .collect()
    }

    /// All members including zero.
    pub fn indices(&self) -> Vec<MultiIndex> {
        enumerate_up_to(self.max_dim, self.max_weight)
            .into_iter()
            .filter(|l| l.max_order() <= self.max_order)
            .collect()
    }
}

/// Frequency vector, rotation number and the lattice both were verified on.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyContext {
    pub omega: Vec<f64>,
    pub params: DiophantineParams,
    pub lattice: Lattice,
    pub alpha: Option<f64>,
    pub interval: (f64, f64),
    pub seed: u64,
}

impl FrequencyContext {
    /// Context from explicit values. Checks ranges only; use
    /// [`FrequencyContext::verify`] to audit the nonresonance conditions.
    pub fn new(
        omega: Vec<f64>,
        params: DiophantineParams,
        lattice: Lattice,
        alpha: Option<f64>,
        interval: (f64, f64),
    ) -> Result<Self> {
        params.validate()?;
        if omega.is_empty() || omega.len() != lattice.max_dim {
            return Err(Error::invalid(
                "frequency",
                format!(
                    "omega has {} entries but the lattice dimension is {}",
                    omega.len(),
                    lattice.max_dim
                ),
            ));
        }
        if let Some(w) = omega.iter().find(|w| !(w.abs() <= 1.0)) {
            return Err(Error::invalid(
                "frequency",
                format!("frequency component {w} is outside [-1, 1]"),
            ));
        }
        if !(interval.0 < interval.1) {
            return Err(Error::invalid(
                "frequency",
                format!("interval [{}, {}] is empty", interval.0, interval.1),
            ));
        }
        if let Some(a) = alpha {
            if !a.is_finite() {
                return Err(Error::invalid("frequency", "alpha must be finite"));
            }
        }
        Ok(Self {
            omega,
            params,
            lattice,
            alpha,
            interval,
            seed: 0,
        })
    }

    pub fn max_dim(&self) -> usize {
        self.omega.len()
    }

    /// Rotation number; panics when it has not been set.
    pub fn alpha(&self) -> f64 {
        self.alpha
            .expect("frequency context has no rotation number; run sample_alpha first")
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        Self {
            alpha: Some(alpha),
            ..self.clone()
        }
    }

    pub fn frequency(&self, l: &MultiIndex) -> f64 {
        l.dot(&self.omega)
    }

    /// Re-checks both nonresonance conditions over the recorded lattice.
    pub fn verify(&self) -> Result<VerificationReport> {
        let mut report = VerificationReport {
            indices_checked: 0,
            diophantine_failures: 0,
            min_diophantine_margin: f64::INFINITY,
            rotation_checked: self.alpha.is_some(),
            rotation_failures: 0,
            min_rotation_distance_ratio: f64::INFINITY,
        };
        for l in self.lattice.nonzero_indices() {
            report.indices_checked += 1;
            let bound = small_divisor_bound(&l, &self.params)?;
            let margin = l.dot(&self.omega).abs() - bound;
            report.min_diophantine_margin = report.min_diophantine_margin.min(margin);
            if margin <= 0.0 {
                report.diophantine_failures += 1;
            }
            if let Some(alpha) = self.alpha {
                let (dist, bound) = rotation_distance(alpha, &self.omega, &l, &self.params, self.interval)?;
                report.min_rotation_distance_ratio = report.min_rotation_distance_ratio.min(dist / bound);
                if dist <= bound {
                    report.rotation_failures += 1;
                }
            }
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub indices_checked: usize,
    pub diophantine_failures: usize,
    pub min_diophantine_margin: f64,
    pub rotation_checked: bool,
    pub rotation_failures: usize,
    /// Smallest `dist((omega,l) alpha / 2pi, Z) / bound`; above 1 when every
    /// index passes.
    pub min_rotation_distance_ratio: f64,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.diophantine_failures == 0 && self.rotation_failures == 0
    }
}

#[derive(Serialize, Deserialize)]
struct LatticeWire {
    max_weight: u64,
    max_order: u32,
}

#[derive(Serialize, Deserialize)]
struct ContextWire {
    omega: Vec<f64>,
    alpha: Option<f64>,
    gamma0: f64,
    mu: f64,
    gamma: f64,
    interval: [f64; 2],
    lattice: LatticeWire,
    seed: u64,
}

impl Serialize for FrequencyContext {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ContextWire {
            omega: self.omega.clone(),
            alpha: self.alpha,
            gamma0: self.params.gamma0,
            mu: self.params.mu,
            gamma: self.params.gamma,
            interval: [self.interval.0, self.interval.1],
            lattice: LatticeWire {
                max_weight: self.lattice.max_weight,
                max_order: self.lattice.max_order,
            },
            seed: self.seed,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FrequencyContext {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = ContextWire::deserialize(d)?;
        let lattice = Lattice {
            max_dim: w.omega.len(),
            max_weight: w.lattice.max_weight,
            max_order: w.lattice.max_order,
        };
        let params = DiophantineParams {
            gamma0: w.gamma0,
            mu: w.mu,
            gamma: w.gamma,
        };
        let mut ctx = FrequencyContext::new(w.omega, params, lattice, w.alpha, (w.interval[0], w.interval[1]))
            .map_err(serde::de::Error::custom)?;
        ctx.seed = w.seed;
        Ok(ctx)
    }
}

/// `gamma0 * prod_i 1 / (1 + i^(1+mu) |l_i|^(1+mu))` over the support of `l`.
pub fn small_divisor_bound(l: &MultiIndex, params: &DiophantineParams) -> Result<f64> {
    if l.is_zero() {
        return Err(Error::ZeroIndex);
    }
    Ok(params.gamma0 / weight_product(l, 1.0 + params.mu))
}

/// `prod_i (1 + (i |l_i|)^exponent)`.
fn weight_product(l: &MultiIndex, exponent: f64) -> f64 {
    l.entries()
        .iter()
        .map(|&(p, v)| 1.0 + (f64::from(p) * f64::from(v.unsigned_abs())).powf(exponent))
        .product()
}

/// `|(omega, l)| > small_divisor_bound(l)`.
pub fn diophantine_check(omega: &[f64], l: &MultiIndex, params: &DiophantineParams) -> Result<bool> {
    let bound = small_divisor_bound(l, params)?;
    Ok(l.try_dot(omega)?.abs() > bound)
}

/// The rotation nonresonance bound `gamma * prod_i 1/(1 + i^(2+2mu)|l_i|^(2+2mu))`.
pub fn rotation_bound(l: &MultiIndex, params: &DiophantineParams) -> Result<f64> {
    if l.is_zero() {
        return Err(Error::ZeroIndex);
    }
    Ok(params.gamma / weight_product(l, 2.0 + 2.0 * params.mu))
}

/// Returns `(min_n |(omega,l) alpha / 2pi - n|, bound)` with `n` ranging over
/// `|n| <= ceil(|(omega,l)| max(|a|,|b|) / 2pi) + 1`.
fn rotation_distance(
    alpha: f64,
    omega: &[f64],
    l: &MultiIndex,
    params: &DiophantineParams,
    interval: (f64, f64),
) -> Result<(f64, f64)> {
    let bound = rotation_bound(l, params)?;
    let w = l.try_dot(omega)?;
    let reach = interval.0.abs().max(interval.1.abs()).max(alpha.abs());
    let n_max = (w.abs() * reach / (2.0 * PI)).ceil() as i64 + 1;
    let x = w * alpha / (2.0 * PI);
    let dist = (-n_max..=n_max)
        .map(|n| (x - n as f64).abs())
        .fold(f64::INFINITY, f64::min);
    Ok((dist, bound))
}

/// True iff `(omega,l) alpha / 2pi` keeps farther than the rotation bound
/// from every integer in the admissible range.
pub fn rotation_check(
    alpha: f64,
    omega: &[f64],
    l: &MultiIndex,
    params: &DiophantineParams,
    interval: (f64, f64),
) -> Result<bool> {
    let (dist, bound) = rotation_distance(alpha, omega, l, params, interval)?;
    Ok(dist > bound)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SampleStats {
    /// Number of candidates drawn, including the accepted one.
    pub attempts: usize,
}

struct CheckTable {
    rows: Vec<(MultiIndex, f64)>,
}

impl CheckTable {
    fn diophantine(lattice: &Lattice, params: &DiophantineParams) -> Result<Self> {
        let rows = lattice
            .nonzero_indices()
            .into_iter()
            .map(|l| small_divisor_bound(&l, params).map(|b| (l, b)))
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    fn accepts(&self, omega: &[f64]) -> bool {
        self.rows.iter().all(|(l, b)| l.dot(omega).abs() > *b)
    }
}

/// Draws `omega` uniformly from `[0,1]^max_dim` until the Diophantine check
/// passes on the whole lattice. Deterministic in `seed`.
pub fn sample_frequency(
    lattice: Lattice,
    params: DiophantineParams,
    seed: u64,
    max_attempts: usize,
) -> Result<(FrequencyContext, SampleStats)> {
    params.validate()?;
    if lattice.max_dim == 0 {
        return Err(Error::invalid("frequency", "max_dim must be at least 1"));
    }
    let table = CheckTable::diophantine(&lattice, &params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut omega = vec![0.0; lattice.max_dim];
    for attempt in 1..=max_attempts {
        for w in omega.iter_mut() {
            *w = rng.gen::<f64>();
        }
        if table.accepts(&omega) {
            let mut ctx = FrequencyContext::new(omega, params, lattice, None, DEFAULT_INTERVAL)?;
            ctx.seed = seed;
            return Ok((ctx, SampleStats { attempts: attempt }));
        }
    }
    Err(Error::ExhaustedAttempts {
        what: "frequency vector",
        attempts: max_attempts,
    })
}

/// Draws `alpha` uniformly from `[a + 2pi gamma, b - 2pi gamma]` until the
/// rotation check passes on the context's lattice, and records it (together
/// with `gamma` and the interval) in `ctx`.
pub fn sample_alpha(
    ctx: &mut FrequencyContext,
    interval: (f64, f64),
    gamma: f64,
    seed: u64,
    max_attempts: usize,
) -> Result<(f64, SampleStats)> {
    let (a, b) = interval;
    if !(gamma > 0.0) {
        return Err(Error::invalid("frequency", "gamma must be positive"));
    }
    if !(b - a > 4.0 * PI * gamma) {
        return Err(Error::IntervalTooSmall { a, b, gamma });
    }
    let params = DiophantineParams { gamma, ..ctx.params };
    let rows: Vec<(MultiIndex, f64)> = ctx
        .lattice
        .nonzero_indices()
        .into_iter()
        .map(|l| {
            let w = l.dot(&ctx.omega);
            (l, w)
        })
        .collect();
    let lo = a + 2.0 * PI * gamma;
    let hi = b - 2.0 * PI * gamma;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 1..=max_attempts {
        let alpha = lo + (hi - lo) * rng.gen::<f64>();
        let mut ok = true;
        for (l, _) in &rows {
            if !rotation_check(alpha, &ctx.omega, l, &params, interval)? {
                ok = false;
                break;
            }
        }
        if ok {
            ctx.alpha = Some(alpha);
            ctx.params = params;
            ctx.interval = interval;
            return Ok((alpha, SampleStats { attempts: attempt }));
        }
    }
    Err(Error::ExhaustedAttempts {
        what: "rotation number",
        attempts: max_attempts,
    })
}

/// Monte Carlo estimate of the measure of frequency vectors that fail the
/// Diophantine check on `lattice`.
pub fn rejection_fraction(lattice: Lattice, params: DiophantineParams, trials: usize, seed: u64) -> Result<f64> {
    params.validate()?;
    let table = CheckTable::diophantine(&lattice, &params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut omega = vec![0.0; lattice.max_dim];
    let mut rejected = 0usize;
    for _ in 0..trials {
        for w in omega.iter_mut() {
            *w = rng.gen::<f64>();
        }
        if !table.accepts(&omega) {
            rejected += 1;
        }
    }
    Ok(rejected as f64 / trials as f64)
}
