//! Numerical engine for invariant curves of almost periodic twist maps.

pub mod error;
pub mod apseries;
pub mod cli;
pub mod frequency;
pub mod homological;
pub mod kam;
pub mod multiindex;
pub mod numeric;
pub mod pendulum;
pub mod twistmap;

pub use error::{Error, Result};
