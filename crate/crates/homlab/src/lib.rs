//! homlab: a numerical laboratory for the fluctuation theory of stochastic
//! homogenization on the periodic torus.
//!
//! The pipeline synthesizes correlated Gaussian coefficient fields, solves
//! the cell problems for the extended corrector, forms the homogenization
//! commutator, and drives Monte Carlo sweeps that test the predicted
//! variance scaling and the pathwise recovery identities.

pub mod corrector;
pub mod derivative;
pub mod ensemble;
pub mod error;
pub mod exec;
pub mod fft;
pub mod functionals;
pub mod gaussian;
pub mod grid;
pub mod hgfd;
pub mod krylov;
pub mod matrix;
pub mod operators;
pub mod report;
pub mod stats;
pub mod testfn;

pub use error::{Error, Result};
pub use grid::{Field, ScalarField, TorusGrid};
