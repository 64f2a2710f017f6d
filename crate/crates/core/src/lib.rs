//! Finite-volume simulation and Monte Carlo verification for interacting
//! Brownian particles with a tagged particle.
//!
//! The crate is organised bottom-up: [`geometry`] and [`potentials`] supply
//! configurations and pair interactions, [`gibbs`] samples grand-canonical
//! ensembles, [`harmonic`] provides exact combinatorial oracles,
//! [`calculus`] evaluates gradients and generators of cylinder functions,
//! [`dynamics`] integrates the particle systems and [`verify`] turns all of
//! the above into statistical tests.

pub mod calculus;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod gibbs;
pub mod harmonic;
pub mod potentials;
pub mod quadrature;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
