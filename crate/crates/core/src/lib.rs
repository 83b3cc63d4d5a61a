//! Mean-field doubly reflected BSDEs on a recombining binomial lattice.
//!
//! Two constructive routes are provided and cross-checked:
//!
//! * [`fixedpoint`]: Picard iteration of the frozen-coefficient reflected
//!   operator, globally or over backward time windows.
//! * [`penalization`]: the double-indexed penalized cascade `Y^{n,m}`,
//!   with monotonicity and estimate monitors.
//!
//! The frozen reflected engine in [`drbsde`] is checked against a
//! brute-force zero-sum Dynkin game in [`oracle`].

pub mod cli;
pub mod conditions;
pub mod drbsde;
pub mod error;
pub mod expr;
pub mod fixedpoint;
pub mod lattice;
pub mod model;
pub mod oracle;
pub mod par;
pub mod penalization;
mod scalar;
mod stage;

pub use error::{Error, Result};
pub use lattice::{AdaptedProcess, Lattice};
