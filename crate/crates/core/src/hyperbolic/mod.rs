//! Hyperbolic geometry of the trace map on S_V and of a linear control.

pub mod delta;
pub mod manifold;
pub mod periodic;
pub mod qnl;
pub mod system;
