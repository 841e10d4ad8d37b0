//! Geometry of second-order ODE systems, with and without first-order
//! velocity constraints.
//!
//! The crate evaluates, at user-chosen points, the objects attached to a
//! system `ẍ^i = F^i(t, x, ẋ)` — the nonlinear connection, the associated
//! linear connection on the evolution space, its torsion, curvature, Jacobi
//! endomorphism and shape maps — and the generalisations of all of these to
//! systems carrying first-order constraints `ẋ^α = Ψ^α(t, x, ẋ^a)`,
//! including the nonholonomic reduction that produces such systems from a
//! Lagrangian. Every defining identity is verifiable numerically through
//! seeded residual suites.
//!
//! Derivatives are exact to the requested order via truncated Taylor (jet)
//! arithmetic; no finite differencing or symbolic algebra is involved.

pub mod constrained;
pub mod error;
pub mod expr;
pub mod glue;
pub mod jet;
pub mod linalg;
pub mod nonholonomic;
pub mod report;
pub mod sode;
pub mod verify;

pub use error::{GeomError, Result};
