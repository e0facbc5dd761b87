//! Variational Flow posterior inference for PDE-governed inverse problems.
//!
//! The crate bundles a small reverse-mode autodiff engine, Karhunen-Loève
//! random fields, finite-difference and pseudo-spectral forward solvers,
//! coupling flows, the Variational Flow model, a Fourier neural operator
//! surrogate, classical baseline samplers, and the adaptive inference loop
//! that ties them together.

pub mod adaptive;
pub mod bench;
pub mod difftensor;
pub mod error;
pub mod flows;
pub mod forward;
pub mod nn;
pub mod randfield;
pub mod rng;
pub mod samplers;
pub mod surrogate;
pub mod vfmodel;

pub use error::{Error, Result};
