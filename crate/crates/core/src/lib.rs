//! Numerical laboratory for multi-type weakly interacting diffusions.
//!
//! The crate simulates finite particle systems and their mean-field limits,
//! evaluates fluctuation statistics, discretizes the path-space integral
//! operators that govern the limit covariances, and samples the limit laws
//! (Gaussian fields, multiple Wiener integrals, Gaussian mixtures) so that
//! the two routes (simulation and limit machinery) can be checked against
//! each other at desk scale.
//!
//! Module map:
//! - [`rng`]: counter-based random streams (reproducible regardless of
//!   thread schedule).
//! - [`expr`]: a small arithmetic-expression parser for config-supplied
//!   coefficient functions.
//! - [`model`]: population layouts, coefficient presets, model specs and
//!   numerical probes of the regularity conditions.
//! - [`simulate`]: Euler–Maruyama engines, reference (mean-field) ensembles,
//!   matrix-SDE fundamental solutions.
//! - [`statistics`]: path functionals, fluctuation statistics, the
//!   bounded-Lipschitz distance.
//! - [`operators`]: Monte Carlo (Nyström) realizations of the path-space
//!   kernels, trace diagnostics, Fredholm solves, limit covariances and the
//!   common-factor random operators.
//! - [`mwi`]: multiple Wiener integral samplers over sample-discretized L²
//!   spaces, symmetric statistics, and the tilted limit law.

pub mod expr;
pub mod model;
pub mod mwi;
pub mod operators;
pub mod rng;
pub mod simulate;
pub mod statistics;
