//! Quantum and semiclassical propagation of spin-carrying particles.
//!
//! The crate pairs an exact split-operator Schrödinger solver with a
//! classical trajectory-ensemble transport of the WKB density, and uses the
//! two to study Stern–Gerlach branching and EPR pair correlations:
//!
//! - [`hilbert`]: spin-j internal states, Wigner rotations, overlap amplitudes.
//! - [`classical`]: leapfrog trajectories, monodromy/Jacobian tracking, density binning.
//! - [`quantum`]: grid wavefunctions, Strang split-operator steps, spinor evolution.
//! - [`correspondence`]: phase decomposition, WKB validity field, ħ sweeps.
//! - [`sterngerlach`]: apparatus model, branch sets, filters, cascades, specimens.
//! - [`epr`]: singlet pairs, joint outcome tables, CHSH.

pub mod classical;
pub mod correspondence;
pub mod epr;
mod error;
pub mod hilbert;
pub mod quantum;
pub mod rng;
pub mod sterngerlach;

pub use error::{Error, Result};
