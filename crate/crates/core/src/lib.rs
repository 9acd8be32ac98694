//! Numerical laboratory for the four-dimensional discrete membrane model:
//! exact sampling, Green functions, intermediate level sets and the
//! multiplicative chaos limit.

pub mod error;
pub mod lattice;
pub mod solver;
pub mod harness;
pub mod green;
pub mod field;
pub mod levelset;
pub mod gmc;

pub use error::{LabError, Result};
