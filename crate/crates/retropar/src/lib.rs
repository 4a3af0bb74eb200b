//! Numerical toolkit for second-order parabolic equations with reversed-time data.
//!
//! The forward problem `u_t = Lu + F(grad u, u, x, t)` on `Q_T = Omega x (0,T)`
//! with zero lateral Dirichlet data is well posed; recovering `u` from the final
//! snapshot `u(x,T) = g(x)` is not. This crate provides the machinery to study
//! that reconstruction numerically:
//!
//! - [`grid`]: uniform space-time grids, finite-difference operators and the
//!   discrete Sobolev norms everything else is measured in,
//! - [`model`]: PDE coefficient presets, globally Lipschitz nonlinearities and
//!   the final-data lifting `v = u - g`,
//! - [`carleman`]: the weight `exp(2(t+1)^nu)`, the `nu(delta)` / rate-exponent
//!   calculus and an empirical verifier for the weighted energy inequality,
//! - [`forward`]: Crank-Nicolson data generation plus calibrated noise,
//! - [`qrm`]: quasi-reversibility (regularized least squares) for the linear case,
//! - [`convexify`]: the Carleman-weighted strictly convex functional, its exact
//!   discrete gradient and projected gradient descent on a ball,
//! - [`report`]: rate tables, log-log fits and CSV emission.

pub mod carleman;
pub mod convexify;
pub mod error;
pub mod forward;
pub mod grid;
pub mod model;
pub mod qrm;
pub mod report;
pub mod sparse;

pub use error::{Error, Result};
pub use grid::{Deriv, Field, Grid, GridSpec, NormKind, SpaceField};
