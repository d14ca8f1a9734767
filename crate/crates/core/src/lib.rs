//! Tight-binding point defects in insulators: configurations, Hamiltonians,
//! finite and zero temperature energies, contour site energies, relaxation
//! and limit studies.

// `!(x > 0.0)` deliberately rejects NaN; index loops mirror the formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod fit;
pub mod hamiltonian;
pub mod lattice;
pub mod limits;
pub mod relax;
pub mod sitegreen;
pub mod spectrum;
pub mod thermo;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
