//! Almost periodic twist maps `x1 = x + y + f(x, y)`, `y1 = y + g(x, y)`
//! and the small-twist variant `x1 = x + delta y + f`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apseries::{ipow, ApSeries, Basis, SeriesWire, Window};
use crate::error::{Error, Result};
use crate::frequency::{FrequencyContext, VerificationReport};
use crate::multiindex::MultiIndex;

#[derive(Debug, Clone)]
pub struct TwistMap {
    pub f: ApSeries,
    pub g: ApSeries,
    pub annulus: (f64, f64),
    pub window: Window,
}

/// `x1 = x + delta y + f(x, y)`, `y1 = y + g(x, y)`.
#[derive(Debug, Clone)]
pub struct SmallTwistMap {
    pub base: TwistMap,
    pub delta: f64,
}

impl TwistMap {
    pub fn new(f: ApSeries, g: ApSeries, annulus: (f64, f64), window: Window) -> Result<Self> {
        if !f.is_real() || !g.is_real() {
            return Err(Error::invalid("twistmap", "f and g must be real series"));
        }
        if f.degree_cap() != g.degree_cap() {
            return Err(Error::invalid("twistmap", "f and g must share a degree cap"));
        }
        if !(annulus.0 < annulus.1) {
            return Err(Error::invalid(
                "twistmap",
                format!("annulus [{}, {}] is empty", annulus.0, annulus.1),
            ));
        }
        f.add(&g)?;
        Ok(Self { f, g, annulus, window })
    }

    /// The map with `f = g = sum_n a_n cos((omega, l_n) x)`. With equal
    /// perturbations the map is `y1 = y + a(x)`, `x1 = x + y1`, which is
    /// exact symplectic when `a` has zero mean.
    pub fn standard_family(
        basis: &Arc<Basis>,
        degree_cap: usize,
        modes: &[(MultiIndex, f64)],
        annulus: (f64, f64),
        window: Window,
    ) -> Result<Self> {
        let trig: Vec<(MultiIndex, f64, f64)> = modes.iter().map(|(l, a)| (l.clone(), *a, 0.0)).collect();
        let f = ApSeries::trig_sum(basis, degree_cap, &trig)?;
        Self::new(f.clone(), f, annulus, window)
    }

    /// The perturbation `f = g = sum_{n <= count} (eps / 2^n) cos(omega_n x)`.
    pub fn cosine_example(basis: &Arc<Basis>, degree_cap: usize, eps: f64, count: u32, window: Window) -> Result<Self> {
        let modes: Vec<(MultiIndex, f64)> = (1..=count)
            .map(|n| (MultiIndex::unit(n, 1), eps / ipow(2.0, n as i32)))
            .collect();
        let ctx = basis.context();
        Self::standard_family(basis, degree_cap, &modes, ctx.interval, window)
    }

    pub fn basis(&self) -> &Arc<Basis> {
        self.f.basis()
    }

    pub fn alpha(&self) -> f64 {
        self.basis().alpha()
    }

    /// `||f|| + ||g||` in `window`.
    pub fn perturbation_norm(&self, window: Window) -> f64 {
        self.f.norm(window) + self.g.norm(window)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (x + y + self.f.evaluate_real(x, y), y + self.g.evaluate_real(x, y))
    }

    pub fn orbit(&self, x: f64, y: f64, steps: usize) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(steps + 1);
        let mut p = (x, y);
        out.push(p);
        for _ in 0..steps {
            p = self.apply(p.0, p.1);
            out.push(p);
        }
        out
    }

    /// Image of the graph `y = phi(x)` at the given abscissae.
    pub fn apply_to_curve(&self, phi: &ApSeries, xs: &[f64]) -> Vec<(f64, f64)> {
        xs.par_iter()
            .map(|&x| self.apply(x, phi.evaluate_real(x, 0.0)))
            .collect()
    }

    /// Probes the intersection property on the graph `y = phi(x)` over
    /// `x_range`. The image is re-parametrized by its abscissa; the signed
    /// gap `Y - phi` between image and curve is scanned for a zero.
    pub fn intersection_check(&self, phi: &ApSeries, x_range: (f64, f64), samples: usize) -> Result<IntersectionResult> {
        if samples < 2 {
            return Err(Error::invalid("twistmap", "intersection check needs at least 2 samples"));
        }
        if phi.degree_cap() != 0 {
            return Err(Error::invalid("twistmap", "curve must be a function of x alone"));
        }
        let (lo, hi) = x_range;
        if !(lo < hi) {
            return Err(Error::invalid("twistmap", "empty abscissa range"));
        }
        let probe = GapProbe::new(self, phi);
        let grid: Vec<f64> = (0..samples)
            .map(|k| lo + (hi - lo) * k as f64 / (samples - 1) as f64)
            .collect();
        let gaps: Vec<f64> = grid.par_iter().map(|&xb| probe.gap(xb)).collect::<Result<_>>()?;
        let min_gap = gaps.iter().copied().fold(f64::INFINITY, f64::min);
        let max_gap = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for k in 0..samples {
            if gaps[k] == 0.0 {
                return Ok(IntersectionResult {
                    found: true,
                    witness: Some(grid[k]),
                    bracket: Some((grid[k], grid[k])),
                    min_gap,
                    max_gap,
                });
            }
            if k + 1 < samples && gaps[k].signum() != gaps[k + 1].signum() {
                let (mut a, mut b, mut ga) = (grid[k], grid[k + 1], gaps[k]);
                while b - a > 1e-10 {
                    let m = 0.5 * (a + b);
                    let gm = probe.gap(m)?;
                    if gm == 0.0 {
                        a = m;
                        b = m;
                        break;
                    }
                    if gm.signum() == ga.signum() {
                        a = m;
                        ga = gm;
                    } else {
                        b = m;
                    }
                }
                return Ok(IntersectionResult {
                    found: true,
                    witness: Some(0.5 * (a + b)),
                    bracket: Some((grid[k], grid[k + 1])),
                    min_gap,
                    max_gap,
                });
            }
        }
        Ok(IntersectionResult {
            found: false,
            witness: None,
            bracket: None,
            min_gap,
            max_gap,
        })
    }

    pub fn to_wire(&self) -> MapWire {
        MapWire {
            annulus: [self.annulus.0, self.annulus.1],
            window: WindowWire {
                r0: self.window.r,
                s0: self.window.s,
            },
            f: self.f.to_wire(),
            g: self.g.to_wire(),
            delta: None,
            ctx: Some(self.basis().context().clone()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IntersectionResult {
    pub found: bool,
    /// Abscissa where the gap vanishes, located to `1e-10`.
    pub witness: Option<f64>,
    /// Grid cell containing the sign change.
    pub bracket: Option<(f64, f64)>,
    pub min_gap: f64,
    pub max_gap: f64,
}

/// Evaluates the vertical gap between a graph and its image at a given
/// image abscissa.
struct GapProbe<'a> {
    map: &'a TwistMap,
    phi: &'a ApSeries,
    dphi: ApSeries,
    fx: ApSeries,
    fy: ApSeries,
}

impl<'a> GapProbe<'a> {
    fn new(map: &'a TwistMap, phi: &'a ApSeries) -> Self {
        Self {
            map,
            phi,
            dphi: phi.dx(),
            fx: map.f.dx(),
            fy: map.f.dy(),
        }
    }

    /// `X(x) = x + phi(x) + f(x, phi(x))` and its derivative.
    fn abscissa(&self, x: f64) -> (f64, f64) {
        let p = self.phi.evaluate_real(x, 0.0);
        let dp = self.dphi.evaluate_real(x, 0.0);
        let value = x + p + self.map.f.evaluate_real(x, p);
        let slope = 1.0 + dp + self.fx.evaluate_real(x, p) + self.fy.evaluate_real(x, p) * dp;
        (value, slope)
    }

    fn gap(&self, xb: f64) -> Result<f64> {
        let x = self.solve(xb)?;
        let p = self.phi.evaluate_real(x, 0.0);
        Ok(p + self.map.g.evaluate_real(x, p) - self.phi.evaluate_real(xb, 0.0))
    }

    /// Solves `X(x) = xb` by safeguarded Newton iteration.
    fn solve(&self, xb: f64) -> Result<f64> {
        let (x0v, s0) = self.abscissa(xb);
        if s0 <= 0.0 {
            return Err(Error::ReparametrizationFailure { x: xb, derivative: s0 });
        }
        let guess = xb - (x0v - xb);
        let mut width = (x0v - xb).abs().max(1e-6);
        let (mut a, mut b);
        loop {
            a = guess - width;
            b = guess + width;
            let (va, sa) = self.abscissa(a);
            let (vb, sb) = self.abscissa(b);
            if sa <= 0.0 || sb <= 0.0 {
                let (x, d) = if sa <= 0.0 { (a, sa) } else { (b, sb) };
                return Err(Error::ReparametrizationFailure { x, derivative: d });
            }
            if va <= xb && vb >= xb {
                break;
            }
            width *= 2.0;
            if width > 1e6 {
                return Err(Error::ReparametrizationFailure { x: xb, derivative: s0 });
            }
        }
        let mut x = guess.clamp(a, b);
        for _ in 0..200 {
            let (v, s) = self.abscissa(x);
            if s <= 0.0 {
                return Err(Error::ReparametrizationFailure { x, derivative: s });
            }
            let r = v - xb;
            if r.abs() <= 1e-12 * (1.0 + xb.abs()) {
                return Ok(x);
            }
            if r < 0.0 {
                a = x;
            } else {
                b = x;
            }
            let newton = x - r / s;
            x = if newton > a && newton < b { newton } else { 0.5 * (a + b) };
            if b - a <= 1e-15 * (1.0 + xb.abs()) {
                return Ok(x);
            }
        }
        Ok(x)
    }
}

impl SmallTwistMap {
    pub fn new(base: TwistMap, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::invalid("twistmap", format!("delta must lie in (0, 1], got {delta}")));
        }
        Ok(Self { base, delta })
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            x + self.delta * y + self.base.f.evaluate_real(x, y),
            y + self.base.g.evaluate_real(x, y),
        )
    }

    /// Rescales the action by `z = delta y` so the map reads
    /// `x1 = x + z + f(x, z / delta)`, `z1 = z + delta g(x, z / delta)`,
    /// centered at `delta alpha`. The returned report re-checks the
    /// rotation nonresonance for `delta alpha`.
    pub fn to_standard(&self) -> Result<(TwistMap, VerificationReport)> {
        let d = self.delta;
        let ctx = self.base.basis().context().with_alpha(d * self.base.alpha());
        let report = ctx.verify()?;
        let basis = Basis::new(ctx)?;
        let rescale = |s: &ApSeries, factor: f64| -> Result<ApSeries> {
            let terms = s.terms().map(|(l, b)| {
                let poly = b
                    .iter()
                    .enumerate()
                    .map(|(j, c)| c * factor * ipow(d, -(j as i32)))
                    .collect();
                (l.clone(), poly)
            });
            ApSeries::from_terms(&basis, s.degree_cap(), s.is_real(), terms)
        };
        let f = rescale(&self.base.f, 1.0)?;
        let g = rescale(&self.base.g, d)?;
        let window = Window::new(self.base.window.r, self.base.window.s * d)?;
        let map = TwistMap::new(f, g, (self.base.annulus.0 * d, self.base.annulus.1 * d), window)?;
        Ok((map, report))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowWire {
    pub r0: f64,
    pub s0: f64,
}

/// JSON form of a map definition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapWire {
    pub annulus: [f64; 2],
    pub window: WindowWire,
    pub f: SeriesWire,
    pub g: SeriesWire,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Frequency context of the series; may instead be supplied separately.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ctx: Option<FrequencyContext>,
}

/// A map file holds either an ordinary or a small twist map.
#[derive(Debug, Clone)]
pub enum MapDefinition {
    Standard(TwistMap),
    SmallTwist(SmallTwistMap),
}

impl MapDefinition {
    pub fn from_wire(basis: &Arc<Basis>, wire: &MapWire) -> Result<Self> {
        let f = ApSeries::from_wire(basis, &wire.f)?;
        let g = ApSeries::from_wire(basis, &wire.g)?;
        let window = Window::new(wire.window.r0, wire.window.s0)?;
        let map = TwistMap::new(f, g, (wire.annulus[0], wire.annulus[1]), window)?;
        match wire.delta {
            None => Ok(MapDefinition::Standard(map)),
            Some(d) => Ok(MapDefinition::SmallTwist(SmallTwistMap::new(map, d)?)),
        }
    }

    /// Builds the map over the context embedded in the file.
    pub fn from_wire_embedded(wire: &MapWire) -> Result<Self> {
        let ctx = wire
            .ctx
            .clone()
            .ok_or_else(|| Error::invalid("twistmap", "map file carries no frequency context"))?;
        Self::from_wire(&Basis::new(ctx)?, wire)
    }

    pub fn to_wire(&self) -> MapWire {
        match self {
            MapDefinition::Standard(m) => m.to_wire(),
            MapDefinition::SmallTwist(m) => MapWire {
                delta: Some(m.delta),
                ..m.base.to_wire()
            },
        }
    }

    pub fn basis(&self) -> &Arc<Basis> {
        match self {
            MapDefinition::Standard(m) => m.basis(),
            MapDefinition::SmallTwist(m) => m.base.basis(),
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        match self {
            MapDefinition::Standard(m) => m.apply(x, y),
            MapDefinition::SmallTwist(m) => m.apply(x, y),
        }
    }

    /// The map in ordinary twist form, rescaling a small twist map.
    pub fn into_standard(self) -> Result<(TwistMap, Option<VerificationReport>)> {
        match self {
            MapDefinition::Standard(m) => Ok((m, None)),
            MapDefinition::SmallTwist(m) => {
                let (map, report) = m.to_standard()?;
                Ok((map, Some(report)))
            }
        }
    }
}
