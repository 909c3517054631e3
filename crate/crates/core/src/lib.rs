//! ADMM solver for deterministic mean-field-type control problems with
//! congestion on the unit torus or a box with rectangular obstacles.

pub mod cases;
pub mod admm;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod krylov;
pub mod model;
pub mod operators;
pub mod pointwise;

pub use error::{Error, Result};
