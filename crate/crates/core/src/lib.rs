//! A numerical laboratory for linear and nonlinear Fokker-Planck-Kolmogorov
//! flows with dissipative drifts.
//!
//! The crate simulates measure flows by paired-noise particle systems and a
//! deterministic 1-D grid scheme, computes exact Kantorovich functionals
//! with bounded costs between particle clouds, and checks quantitative
//! stability estimates relating the distance between two flows to the
//! distance between their initial conditions plus an integrated
//! drift-mismatch term.
//!
//! Modules:
//! - [`measures`]: particle clouds, measure flows, grid densities.
//! - [`cost`]: bounded monotone costs and their time-rescaled variants.
//! - [`transport`]: exact Kantorovich cost, plans, duals, brute-force oracle.
//! - [`dynamics`]: drift/diffusion coefficients, dissipativity certification,
//!   resolvent approximants, generator application.
//! - [`fpk`]: linear Cauchy-problem solvers (particle and 1-D grid).
//! - [`analysis`]: time rescaling, bound verification, stability envelopes.
//! - [`nonlinear`]: fixed-point iteration for measure-dependent drifts.

pub mod analysis;
pub mod cost;
pub mod dynamics;
pub mod error;
pub mod fpk;
pub mod measures;
pub mod nonlinear;
pub mod quad;
pub mod rng;
pub mod transport;

mod linalg;

pub use error::{Error, Result};
