//! Finitely supported integer vectors over the positive integers.
//!
//! A [`MultiIndex`] labels one Fourier exponent `(omega, l) = sum_i l_i omega_i`.
//! It is stored sparsely as `(position, value)` pairs with strictly increasing
//! positions and nonzero values, so equality, ordering and hashing are
//! structural.

use std::fmt;
use std::ops::{Add, Neg};

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};

type Entries = SmallVec<[(u32, i32); 4]>;

#[derive(Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<(u32, i32)>", into = "Vec<(u32, i32)>")]
pub struct MultiIndex {
    entries: Entries,
}

impl MultiIndex {
    pub fn zero() -> Self {
        Self::default()
    }

    /// `value` at `position`, everything else zero.
    pub fn unit(position: u32, value: i32) -> Self {
        assert!(position >= 1, "positions start at 1");
        let mut entries = Entries::new();
        if value != 0 {
            entries.push((position, value));
        }
        Self { entries }
    }

    /// Builds the canonical form from arbitrary pairs: sorts by position,
    /// merges repeated positions and drops zero values.
    pub fn from_pairs<I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u32, i32)>,
    {
        let mut raw: Vec<(u32, i32)> = pairs.into_iter().collect();
        if let Some(&(p, _)) = raw.iter().find(|(p, _)| *p == 0) {
            return Err(Error::InvalidIndex(format!(
                "position {p} is not a positive integer"
            )));
        }
        raw.sort_by_key(|&(p, _)| p);
        let mut entries = Entries::new();
        for (p, v) in raw {
            match entries.last_mut() {
                Some(last) if last.0 == p => {
                    last.1 = last.1.checked_add(v).ok_or_else(|| {
                        Error::InvalidIndex(format!("overflow merging position {p}"))
                    })?;
                }
                _ => entries.push((p, v)),
            }
        }
        entries.retain(|e| e.1 != 0);
        Ok(Self { entries })
    }

    /// Dense constructor: `values[i]` is the entry at position `i + 1`.
    pub fn from_dense(values: &[i32]) -> Self {
        let entries = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0)
            .map(|(i, v)| (i as u32 + 1, *v))
            .collect();
        Self { entries }
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(u32, i32)] {
        &self.entries
    }

    pub fn support_len(&self) -> usize {
        self.entries.len()
    }

    /// Largest position in the support, 0 for the zero index.
    pub fn max_position(&self) -> u32 {
        self.entries.last().map_or(0, |e| e.0)
    }

    /// Largest `|l_i|`.
    pub fn max_order(&self) -> u32 {
        self.entries
            .iter()
            .map(|e| e.1.unsigned_abs())
            .max()
            .unwrap_or(0)
    }

    pub fn get(&self, position: u32) -> i32 {
        self.entries
            .binary_search_by_key(&position, |e| e.0)
            .map_or(0, |i| self.entries[i].1)
    }

    /// `||l|| = sum_i |l_i| * i`.
    pub fn weight(&self) -> u64 {
        self.entries
            .iter()
            .map(|&(p, v)| u64::from(v.unsigned_abs()) * u64::from(p))
            .sum()
    }

    /// `sum_i |l_i|`, the factor a derivative in `x` can pull out of a mode
    /// when `|omega_i| <= 1`.
    pub fn abs_sum(&self) -> u64 {
        self.entries
            .iter()
            .map(|e| u64::from(e.1.unsigned_abs()))
            .sum()
    }

    pub fn negate(&self) -> Self {
        Self {
            entries: self.entries.iter().map(|&(p, v)| (p, -v)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let (a, b) = (&self.entries, &other.entries);
        let mut out = Entries::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => {
                    out.push(a[i]);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    out.push(b[j]);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    let v = a[i].1 + b[j].1;
                    if v != 0 {
                        out.push((a[i].0, v));
                    }
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&a[i..]);
        out.extend_from_slice(&b[j..]);
        Self { entries: out }
    }

    /// `(omega, l)`. Panics if the support reaches past `omega`; use
    /// [`MultiIndex::try_dot`] for unchecked input.
    pub fn dot(&self, omega: &[f64]) -> f64 {
        self.entries
            .iter()
            .map(|&(p, v)| f64::from(v) * omega[p as usize - 1])
            .sum()
    }

    pub fn try_dot(&self, omega: &[f64]) -> Result<f64> {
        if self.max_position() as usize > omega.len() {
            return Err(Error::SupportOutOfRange {
                position: self.max_position(),
                max_dim: omega.len(),
            });
        }
        Ok(self.dot(omega))
    }
}

impl Add for &MultiIndex {
    type Output = MultiIndex;
    fn add(self, rhs: &MultiIndex) -> MultiIndex {
        MultiIndex::add(self, rhs)
    }
}

impl Neg for &MultiIndex {
    type Output = MultiIndex;
    fn neg(self) -> MultiIndex {
        self.negate()
    }
}

impl TryFrom<Vec<(u32, i32)>> for MultiIndex {
    type Error = Error;
    fn try_from(pairs: Vec<(u32, i32)>) -> Result<Self> {
        let positions_increasing = pairs.windows(2).all(|w| w[0].0 < w[1].0);
        if !positions_increasing || pairs.iter().any(|e| e.1 == 0) {
            return Err(Error::InvalidIndex(
                "serialized index must list nonzero values at strictly increasing positions".into(),
            ));
        }
        Self::from_pairs(pairs)
    }
}

impl From<MultiIndex> for Vec<(u32, i32)> {
    fn from(l: MultiIndex) -> Self {
        l.entries.into_vec()
    }
}

impl fmt::Debug for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.entries.is_empty() {
            return f.write_str("0");
        }
        f.write_str("{")?;
        for (k, (p, v)) in self.entries.iter().enumerate() {
            if k > 0 {
                f.write_str(", ")?;
            }
            write!(f, "l{p}={v}")?;
        }
        f.write_str("}")
    }
}

/// Every index with support in `1..=max_dim` and weight at most
/// `max_weight`, ordered by weight and then lexicographically.
pub fn enumerate_up_to(max_dim: usize, max_weight: u64) -> Vec<MultiIndex> {
    assert!(max_dim >= 1, "max_dim must be positive");
    let mut out = Vec::new();
    let mut current = Entries::new();
    fill(1, max_dim as u32, max_weight, &mut current, &mut out);
    out.sort_by(|a, b| a.weight().cmp(&b.weight()).then_with(|| a.cmp(b)));
    out
}

fn fill(position: u32, max_dim: u32, budget: u64, current: &mut Entries, out: &mut Vec<MultiIndex>) {
    if position > max_dim || u64::from(position) > budget {
        out.push(MultiIndex {
            entries: current.clone(),
        });
        return;
    }
    fill(position + 1, max_dim, budget, current, out);
    let max_abs = budget / u64::from(position);
    for a in 1..=max_abs as i32 {
        let rest = budget - u64::from(position) * a as u64;
        for v in [a, -a] {
            current.push((position, v));
            fill(position + 1, max_dim, rest, current, out);
            current.pop();
        }
    }
}
