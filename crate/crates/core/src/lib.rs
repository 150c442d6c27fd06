//! Numerical laboratory for the Ricci-harmonic map flow on model closed
//! manifolds: flow integration, heat kernels of the evolving Laplacian,
//! Sobolev-constant estimation and verification of the kernel upper bounds.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod config;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod heatkernel;
pub mod quadrature;
pub mod sobolev;
pub mod spectral;

pub use error::{Error, Result};
