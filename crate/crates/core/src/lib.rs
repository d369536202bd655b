//! Hierarchical lattice-partitioned piecewise GLMs.
//!
//! Inputs are assigned to cells of a multidimensional lattice; each cell owns a
//! coefficient vector built as a sum of interaction components up to a
//! truncation order. Components are fitted by penalized maximum likelihood with
//! prior scales chosen so that each added component costs at most half an
//! effective degree of freedom.

pub mod artifact;
pub mod data;
pub mod decomposition;
pub mod error;
pub mod evaluation;
pub mod fit;
pub mod glm;
pub mod lattice;
pub mod regularization;
pub mod simulate;
pub mod special;
pub mod stacking;

pub use error::{Error, Result};
