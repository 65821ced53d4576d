//! Free-boundary solver for multivariate American basket put options.
//!
//! The early-exercise region of an American put on an index is star-shaped in
//! the asset prices, so its boundary is a single-valued surface over time and
//! the angle variables of the price simplex. This crate fixes that moving
//! boundary onto the hyperplane `x1 = 1` by a change of variables, which turns
//! the obstacle problem into a parabolic equation whose coefficients carry the
//! unknown boundary function `F`. The solver then alternates between
//!
//! 1. building a WKB (heat-kernel) expansion of the transition density of the
//!    transformed operator for the current `F`,
//! 2. solving a weakly singular Volterra integral equation on the hyperplane
//!    for the boundary density that enforces the smooth-fit condition, and
//! 3. reassembling the value function and the next boundary surface from
//!    convolutions with the density,
//!
//! iterating to the fixed point. Boundary Greeks (time and spatial derivatives
//! of `F` up to second order) fall out of the same convolutions by
//! differentiating the density analytically.
//!
//! Reference solvers (a CRR binomial tree and a projected-SOR LCP solver) live
//! in [`oracle`] and share no numerical code with the main path.

pub mod config;
pub mod error;
pub mod grid;
pub mod model;
pub mod oracle;
pub mod quad;
pub mod report;
pub mod solver;
pub mod transform;
pub mod volterra;
pub mod wkb;

pub use error::{Error, Result};
