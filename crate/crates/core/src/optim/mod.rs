//! Numerical machinery shared by the exact solvers: scalar root finding and
//! a log-barrier Newton method for small dense convex programs.

pub mod barrier;
pub mod scalar;

pub use barrier::{minimize, BarrierOptions, BarrierResult, ConvexObjective, LinearConstraints};
