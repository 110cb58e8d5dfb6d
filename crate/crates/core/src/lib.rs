//! Numerics for the Fibonacci trace map and its spectral, thermodynamic and
//! hyperbolic companions.
//!
//! Each module is usable on its own; `cli` wires them into the `quasitrace`
//! binary and `verify` holds the acceptance suite.

pub mod cli;
pub mod error;
pub mod hyperbolic;
pub mod par;
pub mod spectral;
pub mod stats;
pub mod sumproduct;
pub mod thermo;
pub mod trace_map;
pub mod tridiag;
pub mod verify;

pub use error::{Error, Result};
