//! Nonlinear Young integration and its applications: sewing of two-point
//! germs, flows of rough differential equations, rough transport equations,
//! Monte-Carlo Feynman-Kac solvers with rough potentials, and fractional
//! Brownian sheets with chaining diagnostics.

pub mod error;
pub mod field;
pub mod fk;
pub mod flow;
pub mod gaussian;
pub mod io;
pub mod numeric;
pub mod path;
pub mod sewing;
pub mod transport;

pub use error::{Error, Result};
pub use field::{Domain, HolderProfile, RoughField};
pub use path::Path;
