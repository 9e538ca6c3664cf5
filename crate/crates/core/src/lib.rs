//! Multi-stratum two-level and mixed designs: design keys, aberration
//! criteria and swarm-based search.

pub mod aberration;
pub mod cli;
pub mod error;
pub mod gf2;
pub mod io;
pub mod key;
pub mod sib;
pub mod structure;

pub use error::{Error, Result};

/// Exact rational arithmetic used for aberration values.
pub type Rational = num_rational::Ratio<i128>;
