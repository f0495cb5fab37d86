//! Spectral homogenization of nonlocal convolution operators.
//!
//! The crate computes the bottom of the spectrum of operators of the form
//!
//! ```text
//! (L_eps rho)(x) = -eps^-d * Int_Omega J((x-y)/eps) kappa(x, y, x/eps, y/eps) rho(y) dy + a(x, x/eps) rho(x)
//! ```
//!
//! on a box `Omega`, together with the periodic cell problems that describe
//! their small-`eps` behaviour:
//!
//! * [`expr`] parses the coefficient expressions supplied in run configs.
//! * [`model`] holds validated problem data and kernel tail control.
//! * [`cell`] solves the torus eigenproblems defining `H(p, x)`, the
//!   correctors and the effective diffusion matrix.
//! * [`effective`] discretizes the limiting constant-coefficient operator.
//! * [`direct`] assembles `L_eps` itself and computes its bottom eigenpair.
//! * [`hj`] solves the limiting Hamilton-Jacobi ergodic problem.
//! * [`config`] and [`experiment`] drive reproducible runs from JSON configs.

pub mod cell;
pub mod config;
pub mod direct;
pub mod effective;
pub mod error;
pub mod experiment;
pub mod expr;
pub mod hj;
pub mod linalg;
pub mod model;

pub use error::{Error, Result};
