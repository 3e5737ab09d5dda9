use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{ApSeries, Basis};
use crate::error::{Error, Result};
use crate::multiindex::MultiIndex;

/// JSON form of a series: coefficients as interleaved `[re, im, ...]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesWire {
    pub real: bool,
    pub degree_cap: usize,
    pub alpha: f64,
    pub terms: Vec<TermWire>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermWire {
    pub index: MultiIndex,
    pub poly: Vec<f64>,
}

impl ApSeries {
    pub fn to_wire(&self) -> SeriesWire {
        SeriesWire {
            real: self.real,
            degree_cap: self.cap,
            alpha: self.basis.alpha(),
            terms: self
                .terms()
                .map(|(l, b)| {
                    let last = b.iter().rposition(|c| c.re != 0.0 || c.im != 0.0).unwrap_or(0);
                    TermWire {
                        index: l.clone(),
                        poly: b[..=last].iter().flat_map(|c| [c.re, c.im]).collect(),
                    }
                })
                .collect(),
        }
    }

    /// Rebuilds a series over `basis`, which must carry the same rotation
    /// number the series was written with unless the series does not
    /// depend on the action.
    pub fn from_wire(basis: &Arc<Basis>, wire: &SeriesWire) -> Result<Self> {
        if wire.degree_cap > 0 && wire.alpha.to_bits() != basis.alpha().to_bits() {
            return Err(Error::invalid(
                "apseries",
                format!("series is centered at alpha = {} but the context has {}", wire.alpha, basis.alpha()),
            ));
        }
        let mut terms: Vec<(MultiIndex, Vec<Complex64>)> = Vec::with_capacity(wire.terms.len());
        for t in &wire.terms {
            if t.poly.len() % 2 != 0 {
                return Err(Error::invalid(
                    "apseries",
                    format!("coefficient list of {} has odd length", t.index),
                ));
            }
            let poly = t.poly.chunks(2).map(|p| Complex64::new(p[0], p[1])).collect();
            terms.push((t.index.clone(), poly));
        }
        ApSeries::from_terms(basis, wire.degree_cap, wire.real, terms)
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::small_basis;
    use super::*;

    #[test]
    fn wire_round_trip() {
        let b = small_basis(4);
        let f = ApSeries::trig_sum(&b, 3, &[(MultiIndex::unit(2, 1), 0.3, 0.1)])
            .unwrap()
            .mul(&ApSeries::action(&b, 3).unwrap().add_constant(1.0))
            .unwrap();
        let json = serde_json::to_string(&f.to_wire()).unwrap();
        let wire: SeriesWire = serde_json::from_str(&json).unwrap();
        let g = ApSeries::from_wire(&b, &wire).unwrap();
        assert_eq!(f.coeffs, g.coeffs);
        assert!(json.contains("\"index\":[[2,1]]"));
    }

    #[test]
    fn wire_rejects_wrong_center() {
        let b = small_basis(4);
        let mut wire = ApSeries::constant(&b, 1, 1.0).to_wire();
        wire.alpha += 1e-3;
        assert!(ApSeries::from_wire(&b, &wire).is_err());
    }
}
