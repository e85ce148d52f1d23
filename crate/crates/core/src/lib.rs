//! Dark matter halo localization from galaxy ellipticities.
//!
//! The crate bundles a compiler for a small BUGS-style modelling language
//! ([`dsl`]), a single-site adaptive Metropolis-within-Gibbs sampler over the
//! compiled graph ([`mcmc`]), a CMA-ES optimizer with a halo fitting driver
//! ([`cmaes`]), the hand-written lensing model that the compiled graph is
//! checked against ([`lensing`]) and a synthetic sky simulator with CSV I/O
//! ([`sky`]).

pub mod cmaes;
pub mod density;
pub mod dsl;
pub mod lensing;
pub mod mcmc;
pub mod sky;

pub use lensing::{Ellipticity, Galaxy, Halo, LensModelParams, Point2, Sky};

/// The halo model in the modelling language. Expects constants `G` and `H`
/// and data `gx`, `gy`, `e1`, `e2` (see [`sky::model_bindings`]).
pub const DARKMATTER_MODEL: &str = include_str!("../../../models/darkmatter.bug");
