//! Particle solvers for McKean-Vlasov SDEs driven by fractional Brownian motion
//! (`H > 1/2`), with Bismut-type Monte Carlo estimators of Lions derivatives.
//!
//! The pieces, bottom up:
//!
//! - [`frac_calc`]: fractional integrals and derivatives, the Volterra kernel
//!   `K_H` and the operators built from it.
//! - [`fbm`]: fBm paths coupled to the Wiener process that generates them.
//! - [`measure`]: empirical measures, Wasserstein distances, pushforwards.
//! - [`model`] and [`solver`]: drifts, diffusions and the particle schemes.
//! - [`sensitivity`]: first-variation and Malliavin flows, Bismut directions.
//! - [`bismut`]: the estimators and their finite-difference oracles.

pub mod bismut;
pub mod error;
pub mod fbm;
pub mod frac_calc;
pub mod grid;
pub mod measure;
pub mod model;
pub mod quad;
pub mod rng;
pub mod sensitivity;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
pub use grid::{GridFunction, HurstParam, TimeGrid};
