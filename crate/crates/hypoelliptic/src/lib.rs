//! Desk-scale laboratory for hypoelliptic diffusions.
//!
//! The crate implements, at small dimension and finite mesh, the complete
//! chain of computational objects behind smoothness-of-density arguments for
//! diffusions: exact Lie-bracket generation with a pointwise parabolic
//! bracket-condition checker, Stratonovich SDE integration with co-evolved
//! Jacobian and inverse-Jacobian flows, a finite-dimensional Malliavin
//! calculus over noise increments verified against an exact Gaussian moment
//! oracle, Malliavin covariance matrices with non-degeneracy scaling
//! diagnostics, and an empirical harness for the quantitative Doob-Meyer
//! (Norris) estimate.
//!
//! Start with the runnable programs under `examples/`; each one exercises a
//! major capability end to end. The `hypoelliptic` binary exposes the same
//! machinery as a reproducible experiment harness.

pub mod expr;
pub mod rng;
pub mod sde;
pub mod vfield;
pub mod wiener;

pub use expr::{Expr, ExprRef};
